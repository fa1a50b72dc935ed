//! Frame sampling, face alignment, the zero-matrix face placeholder, privacy
//! filters, resolution degradation, frame decoding and the clip cache.

pub mod align;
pub mod cache;
pub mod dataset;
pub mod decode;
pub mod face_data;
pub mod privacy;
pub mod resize;
pub mod sample;
pub mod sampling;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

pub use align::{align_face_crop, SimilarityTransform};
pub use dataset::ClipDataset;
pub use decode::{Frame, FrameSource};
pub use face_data::{build_face_crops, FaceCrop};
pub use privacy::{privacy_augment, PrivacyMode};
pub use resize::degrade_resolution;
pub use sample::{build_raw_sample, face_input_or_zero, Normalization, RawSample, Sample, SampleOptions};
pub use sampling::{sample_frame_indices, SamplingConfig, SamplingMode};

/// Side length of the square face crop fed to the face stream.
pub const FACE_SIZE: usize = 288;

/// `T x H x W x 3` frame stack and the source frame index of each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f32>,
    pub source_indices: Vec<usize>,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>, source_indices: Vec<usize>) -> Self {
        debug_assert_eq!(frames.dim().0, source_indices.len());
        VideoClip { frames, source_indices }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }
}

/// Aligned face crop, or the all-zero placeholder when no face is available.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceInput {
    pub pixels: Array3<f32>,
    pub present: bool,
}

impl FaceInput {
    pub fn absent(size: usize) -> Self {
        FaceInput {
            pixels: Array3::zeros((size, size, 3)),
            present: false,
        }
    }

    pub fn present(pixels: Array3<f32>) -> Self {
        FaceInput { pixels, present: true }
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}
