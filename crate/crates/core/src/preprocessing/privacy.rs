//! Face obscuring: Gaussian blur or blackout inside face boxes.
//!
//! A box covers the pixel rows `floor(y1)..ceil(y2)` and columns
//! `floor(x1)..ceil(x2)`, clamped to the frame. Pixels outside every box are
//! never written.

use ndarray::{s, Array3, ArrayViewMut3, Axis};
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::datamodel::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    Blur,
    Blackout,
}

/// Blur standard deviation relative to the longer box side.
pub const BLUR_SIGMA_FRACTION: f64 = 0.15;
/// Kernel half-width in units of sigma.
pub const BLUR_TRUNCATE: f64 = 3.0;

fn pixel_range(lo: f64, hi: f64, len: usize) -> (usize, usize) {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().max(0.0) as usize).min(len);
    (a.min(b), b)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (BLUR_TRUNCATE * sigma).ceil() as i64;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// One separable pass along `axis` of the region. Taps that fall outside the
/// region are dropped and the remaining weights renormalized.
fn blur_axis(region: &mut ArrayViewMut3<f32>, kernel: &[f64], axis: usize) {
    let radius = (kernel.len() / 2) as i64;
    let src = region.to_owned();
    let len = src.len_of(Axis(axis)) as i64;
    for i in 0..len {
        let lo = (i - radius).max(0);
        let hi = (i + radius).min(len - 1);
        let total: f64 = (lo..=hi).map(|j| kernel[(j - i + radius) as usize]).sum();
        let mut acc = Array3::<f64>::zeros(src.index_axis(Axis(axis), 0).insert_axis(Axis(axis)).dim());
        for j in lo..=hi {
            let wgt = kernel[(j - i + radius) as usize] / total;
            let line = src.index_axis(Axis(axis), j as usize).insert_axis(Axis(axis));
            acc.zip_mut_with(&line, |a, &v| *a += wgt * v as f64);
        }
        region
            .index_axis_mut(Axis(axis), i as usize)
            .assign(&acc.index_axis(Axis(axis), 0).mapv(|v| v as f32));
    }
}

/// Obscures the given boxes of one `H x W x C` frame in place.
pub fn obscure_frame(frame: &mut Array3<f32>, boxes: &[BBox], mode: PrivacyMode) {
    let (h, w, _) = frame.dim();
    for b in boxes {
        let (r0, r1) = pixel_range(b.y1, b.y2, h);
        let (c0, c1) = pixel_range(b.x1, b.x2, w);
        if r0 == r1 || c0 == c1 {
            continue;
        }
        let mut region = frame.slice_mut(s![r0..r1, c0..c1, ..]);
        match mode {
            PrivacyMode::Blackout => region.fill(0.0),
            PrivacyMode::Blur => {
                let sigma = BLUR_SIGMA_FRACTION * b.width().max(b.height());
                if sigma <= 0.0 {
                    continue;
                }
                let kernel = gaussian_kernel(sigma);
                blur_axis(&mut region, &kernel, 0);
                blur_axis(&mut region, &kernel, 1);
            }
        }
    }
}

/// Applies `mode` to the face boxes of every clip frame; `boxes[t]` lists the
/// boxes of clip frame `t`, and frames past the end of `boxes` are untouched.
pub fn privacy_augment(clip: &VideoClip, boxes: &[Vec<BBox>], mode: PrivacyMode) -> VideoClip {
    let mut out = clip.clone();
    for (t, frame_boxes) in boxes.iter().enumerate().take(clip.num_frames()) {
        if frame_boxes.is_empty() {
            continue;
        }
        let mut frame = out.frames.index_axis(Axis(0), t).to_owned();
        obscure_frame(&mut frame, frame_boxes, mode);
        out.frames.index_axis_mut(Axis(0), t).assign(&frame);
    }
    out
}
