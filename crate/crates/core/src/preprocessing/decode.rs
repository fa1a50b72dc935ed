//! Frame sources. Frames are `H x W x 3` `f32` arrays in `[0, 1]`.
//!
//! Raw video files (`.agv`) hold `b"AGEVID01"`, then little-endian `u32`
//! frame count, height, width and channels (3), then the frames as
//! interleaved `u8` RGB, row-major. A directory path is read as a sequence of
//! images sorted by file name, and a `synth:` path renders a synthetic video.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array3;

use crate::synthetic::{SynthVideo, SYNTH_PREFIX};
use crate::{Error, Result};

pub type Frame = Array3<f32>;

pub const RAW_VIDEO_MAGIC: &[u8; 8] = b"AGEVID01";
const RAW_HEADER_LEN: u64 = 8 + 16;

pub trait FrameSource: Send + Sync {
    fn num_frames(&self) -> usize;
    /// `(height, width)` of every frame.
    fn frame_size(&self) -> (usize, usize);
    fn frame(&self, index: usize) -> Result<Frame>;
}

fn out_of_range(index: usize, n: usize) -> Error {
    Error::Decode(format!("frame {index} out of range for a {n}-frame video"))
}

/// Frames held in memory.
pub struct MemorySource {
    frames: Vec<Frame>,
}

impl MemorySource {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Decode("empty frame list".into()))?.dim();
        if first.2 != 3 || frames.iter().any(|f| f.dim() != first) {
            return Err(Error::Decode("frames must share one H x W x 3 shape".into()));
        }
        Ok(MemorySource { frames })
    }
}

impl FrameSource for MemorySource {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn frame_size(&self) -> (usize, usize) {
        let (h, w, _) = self.frames[0].dim();
        (h, w)
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| out_of_range(index, self.frames.len()))
    }
}

impl FrameSource for SynthVideo {
    fn num_frames(&self) -> usize {
        self.spec.frames
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.spec.height, self.spec.width)
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.spec.frames {
            return Err(out_of_range(index, self.spec.frames));
        }
        Ok(self.render(index))
    }
}

/// A `.agv` raw video file, read frame by frame.
pub struct RawVideoFile {
    path: PathBuf,
    file: Mutex<File>,
    frames: usize,
    height: usize,
    width: usize,
}

impl RawVideoFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; RAW_HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|_| Error::Decode(format!("{}: truncated raw video header", path.display())))?;
        if &header[..8] != RAW_VIDEO_MAGIC {
            return Err(Error::Decode(format!("{}: not a raw video file", path.display())));
        }
        let field = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (frames, height, width, channels) = (field(0), field(1), field(2), field(3));
        if channels != 3 || frames == 0 || height == 0 || width == 0 {
            return Err(Error::Decode(format!(
                "{}: unsupported layout {frames}x{height}x{width}x{channels}",
                path.display()
            )));
        }
        let expected = RAW_HEADER_LEN + (frames * height * width * 3) as u64;
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if actual < expected {
            return Err(Error::Decode(format!(
                "{}: {actual} bytes, expected {expected}",
                path.display()
            )));
        }
        Ok(RawVideoFile {
            path: path.to_path_buf(),
            file: Mutex::new(file),
            frames,
            height,
            width,
        })
    }
}

impl FrameSource for RawVideoFile {
    fn num_frames(&self) -> usize {
        self.frames
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.frames {
            return Err(out_of_range(index, self.frames));
        }
        let len = self.height * self.width * 3;
        let mut buf = vec![0u8; len];
        {
            let mut file = self.file.lock().map_err(|_| Error::Decode("poisoned file lock".into()))?;
            file.seek(SeekFrom::Start(RAW_HEADER_LEN + (index * len) as u64))
                .and_then(|_| file.read_exact(&mut buf))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(Array3::from_shape_vec((self.height, self.width, 3), buf.into_iter().map(|b| b as f32 / 255.0).collect())
            .expect("buffer length matches shape"))
    }
}

/// Writes frames (values clamped to `[0, 1]`) as a `.agv` raw video.
pub fn write_raw_video(path: &Path, frames: &[Frame]) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames to write".into()))?.dim();
    if first.2 != 3 || frames.iter().any(|f| f.dim() != first) {
        return Err(Error::Shape("frames must share one H x W x 3 shape".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(RAW_VIDEO_MAGIC)?;
    for v in [frames.len(), first.0, first.1, 3] {
        write(&(v as u32).to_le_bytes())?;
    }
    for f in frames {
        let bytes: Vec<u8> = f.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write(&bytes)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A directory of still images, one per frame, ordered by file name.
pub struct ImageSequence {
    files: Vec<PathBuf>,
    height: usize,
    width: usize,
}

impl ImageSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        let first = files
            .first()
            .ok_or_else(|| Error::Decode(format!("{}: no png/jpeg frames", dir.display())))?;
        let (width, height) = image::image_dimensions(first).map_err(|e| Error::Decode(format!("{}: {e}", first.display())))?;
        Ok(ImageSequence {
            files,
            height: height as usize,
            width: width as usize,
        })
    }
}

impl FrameSource for ImageSequence {
    fn num_frames(&self) -> usize {
        self.files.len()
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let path = self.files.get(index).ok_or_else(|| out_of_range(index, self.files.len()))?;
        let img = image::open(path)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != (self.height, self.width) {
            return Err(Error::Decode(format!("{}: frame size changed mid-sequence", path.display())));
        }
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
    }
}

/// Opens the frame source named by a manifest path. Relative paths resolve
/// against `base`.
pub fn open_source(path: &str, base: Option<&Path>) -> Result<Box<dyn FrameSource>> {
    if path.starts_with(SYNTH_PREFIX) {
        return Ok(Box::new(SynthVideo::from_path(path)?));
    }
    let p = Path::new(path);
    let resolved = match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    };
    if resolved.is_dir() {
        Ok(Box::new(ImageSequence::open(&resolved)?))
    } else if resolved.exists() {
        Ok(Box::new(RawVideoFile::open(&resolved)?))
    } else {
        Err(Error::io(
            &resolved,
            std::io::Error::new(std::io::ErrorKind::NotFound, "video not found"),
        ))
    }
}
