//! Turning a manifest record into model inputs.

use log::warn;
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use super::align::align_face_crop;
use super::decode::FrameSource;
use super::privacy::{obscure_frame, PrivacyMode};
use super::resize::{crop_resize, degrade_resolution, resize_image};
use super::sampling::{sample_frame_indices, SamplingConfig};
use super::{FaceInput, VideoClip};
use crate::datamodel::{AgeClass, FaceAnnotation, VideoRecord};
use crate::{Error, Result};

/// How far (in frames) from the query frame a face annotation may be borrowed.
pub const FACE_SEARCH_RADIUS: usize = 8;

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet channel statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    /// Normalizes the trailing (channel) axis in place.
    pub fn apply<D: ndarray::RemoveAxis>(&self, x: &mut ndarray::Array<f32, D>) {
        let last = Axis(x.ndim() - 1);
        for (c, mut lane) in x.axis_iter_mut(last).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            lane.mapv_inplace(|v| (v - m) / s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub sampling: SamplingConfig,
    /// Obscures face boxes in the main stream; the face input is then the
    /// zero placeholder.
    pub privacy: Option<PrivacyMode>,
    /// Shrinks frames to this size and back.
    pub low_res: Option<(usize, usize)>,
    /// Crops each frame to its person box when one is annotated.
    pub use_person_boxes: bool,
}

impl SampleOptions {
    pub fn new(sampling: SamplingConfig) -> Self {
        SampleOptions {
            sampling,
            privacy: None,
            low_res: None,
            use_person_boxes: false,
        }
    }
}

/// Clip and face in `[0, 1]`, before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub clip: VideoClip,
    pub face: FaceInput,
    pub label: Option<AgeClass>,
}

/// Normalized model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub face: FaceInput,
    pub label: Option<AgeClass>,
}

impl RawSample {
    /// Normalizes the clip, and the face when present. The absent-face
    /// placeholder stays exactly zero.
    pub fn normalize(&self, norm: &Normalization) -> Sample {
        let mut clip = self.clip.clone();
        norm.apply(&mut clip.frames);
        let mut face = self.face.clone();
        if face.present {
            norm.apply(&mut face.pixels);
        }
        Sample {
            clip,
            face,
            label: self.label,
        }
    }
}

/// Face annotation nearest to `frame_index`, within the search radius. Ties
/// go to the earlier frame.
pub fn nearest_face(record: &VideoRecord, frame_index: usize) -> Option<(usize, &FaceAnnotation)> {
    let lo = frame_index.saturating_sub(FACE_SEARCH_RADIUS);
    let hi = frame_index + FACE_SEARCH_RADIUS;
    record
        .face_boxes
        .range(lo..=hi)
        .min_by_key(|(&f, _)| (f.abs_diff(frame_index), f))
        .map(|(&f, a)| (f, a))
}

/// Aligned face crop for `frame_index`, or the zero placeholder when no
/// annotation lies within the search radius or the annotation cannot be
/// aligned.
pub fn face_input_or_zero(
    record: &VideoRecord,
    frame_index: usize,
    source: &dyn FrameSource,
    face_size: usize,
) -> Result<FaceInput> {
    let Some((f, ann)) = nearest_face(record, frame_index) else {
        return Ok(FaceInput::absent(face_size));
    };
    let frame = source.frame(f)?;
    match align_face_crop(&frame, &ann.bbox, ann.eyes, (face_size, face_size)) {
        Ok(face) => Ok(face),
        Err(Error::Alignment(msg)) => {
            warn!("{} frame {f}: {msg}; using the zero face", record.id);
            Ok(FaceInput::absent(face_size))
        }
        Err(e) => Err(e),
    }
}

/// Index domain of the video: every frame, or in person-box mode only the
/// frames carrying a person box.
fn frame_domain(record: &VideoRecord, n_frames: usize, opts: &SampleOptions) -> Vec<usize> {
    if opts.use_person_boxes && !record.person_boxes.is_empty() {
        record.person_boxes.keys().copied().filter(|&f| f < n_frames).collect()
    } else {
        (0..n_frames).collect()
    }
}

/// Samples, decodes and prepares one clip and its face input.
pub fn build_raw_sample(
    record: &VideoRecord,
    source: &dyn FrameSource,
    opts: &SampleOptions,
    seed: u64,
) -> Result<RawSample> {
    let cfg = &opts.sampling;
    let n = source.num_frames();
    if n == 0 {
        return Err(Error::Decode(format!("{}: video has no frames", record.id)));
    }
    if n != record.frame_count {
        warn!("{}: manifest lists {} frames, source has {n}", record.id, record.frame_count);
    }
    let domain = frame_domain(record, n, opts);
    if domain.is_empty() {
        return Err(Error::Validation(format!("{}: no usable frames", record.id)));
    }
    let indices: Vec<usize> = sample_frame_indices(domain.len(), cfg, seed)
        .into_iter()
        .map(|i| domain[i])
        .collect();

    let (h, w) = (cfg.clip_height, cfg.clip_width);
    let mut frames = Array4::<f32>::zeros((indices.len(), h, w, 3));
    for (t, &f) in indices.iter().enumerate() {
        let mut frame = source.frame(f)?;
        if let Some(mode) = opts.privacy {
            if let Some((_, ann)) = nearest_face(record, f) {
                obscure_frame(&mut frame, &[ann.bbox], mode);
            }
        }
        let person = if opts.use_person_boxes { record.person_boxes.get(&f) } else { None };
        let resized = match person {
            Some(bbox) => crop_resize(&frame, bbox, h, w),
            None => resize_image(&frame, h, w),
        };
        frames.index_axis_mut(Axis(0), t).assign(&resized);
    }
    let mut clip = VideoClip::new(frames, indices);
    if let Some(low) = opts.low_res {
        clip = degrade_resolution(&clip, low);
    }

    let face = if opts.privacy.is_some() {
        FaceInput::absent(cfg.face_size)
    } else {
        let centre = clip.source_indices[clip.num_frames() / 2];
        face_input_or_zero(record, centre, source, cfg.face_size)?
    };
    Ok(RawSample {
        clip,
        face,
        label: Some(record.label),
    })
}
