//! Prepared-clip cache, one file per clip, all integers and floats little
//! endian:
//!
//! ```text
//! b"AGECLIP1"
//! u8  label (0-3, 255 = none)
//! u32 T, H, W, C
//! u32 source_indices[T]
//! f32 clip[T * H * W * C]       row-major T, H, W, C
//! u8  face_present (0/1)
//! u32 FH, FW, FC
//! f32 face[FH * FW * FC]
//! ```
//!
//! Values are the un-normalized `[0, 1]` pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};

use super::sample::RawSample;
use super::{FaceInput, VideoClip};
use crate::datamodel::AgeClass;
use crate::{Error, Result};

pub const CLIP_CACHE_MAGIC: &[u8; 8] = b"AGECLIP1";

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_f32s<W: Write>(w: &mut W, data: impl Iterator<Item = f32>) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_clip_cache(path: &Path, sample: &RawSample) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        w.write_all(CLIP_CACHE_MAGIC)?;
        w.write_all(&[sample.label.map_or(255, |l| l.index() as u8)])?;
        let (t, h, wd, c) = sample.clip.frames.dim();
        for v in [t, h, wd, c] {
            put_u32(&mut w, v)?;
        }
        for &i in &sample.clip.source_indices {
            put_u32(&mut w, i)?;
        }
        put_f32s(&mut w, sample.clip.frames.iter().copied())?;
        w.write_all(&[sample.face.present as u8])?;
        let (fh, fw, fc) = sample.face.pixels.dim();
        for v in [fh, fw, fc] {
            put_u32(&mut w, v)?;
        }
        put_f32s(&mut w, sample.face.pixels.iter().copied())?;
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
    name: String,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Decode(format!("{}: truncated while reading {what}", self.name)))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_clip_cache(path: &Path) -> Result<RawSample> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        name: path.display().to_string(),
    };
    if r.bytes(8, "magic")? != CLIP_CACHE_MAGIC {
        return Err(Error::Decode(format!("{}: not a clip cache file", r.name)));
    }
    let label = match r.u8("label")? {
        255 => None,
        i => Some(AgeClass::from_index(i as usize).ok_or_else(|| Error::Decode(format!("{}: bad label {i}", r.name)))?),
    };
    let (t, h, w, c) = (r.u32("T")?, r.u32("H")?, r.u32("W")?, r.u32("C")?);
    let indices = (0..t).map(|_| r.u32("source indices")).collect::<Result<Vec<_>>>()?;
    let data = r.f32s(t * h * w * c, "clip data")?;
    let frames = Array4::from_shape_vec((t, h, w, c), data).map_err(|e| Error::Decode(e.to_string()))?;
    let present = r.u8("face flag")? != 0;
    let (fh, fw, fc) = (r.u32("FH")?, r.u32("FW")?, r.u32("FC")?);
    let face = Array3::from_shape_vec((fh, fw, fc), r.f32s(fh * fw * fc, "face data")?)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if !present && face.iter().any(|&v| v != 0.0) {
        return Err(Error::Decode(format!("{}: absent face with non-zero pixels", r.name)));
    }
    Ok(RawSample {
        clip: VideoClip::new(frames, indices),
        face: FaceInput { pixels: face, present },
        label,
    })
}
