//! Separable resampling in continuous pixel coordinates (pixel `i` covers
//! `[i, i + 1)`). Enlarging uses bilinear interpolation at pixel centres with
//! edge clamping; shrinking averages source pixels by their coverage of each
//! output pixel, so a reduction to a single pixel is the plain mean.

use ndarray::{Array3, Array4, Axis};

use super::VideoClip;
use crate::datamodel::BBox;

/// Per output sample: `(source index, weight)` pairs summing to one.
type AxisWeights = Vec<Vec<(usize, f32)>>;

/// Weights resampling the source interval `[start, end)` of an axis of length
/// `len` onto `out` samples.
fn axis_weights(len: usize, start: f64, end: f64, out: usize) -> AxisWeights {
    assert!(len > 0 && out > 0 && end > start);
    let scale = (end - start) / out as f64;
    let last = (len - 1) as f64;
    if start == 0.0 && end == len as f64 && out == len {
        return (0..len).map(|i| vec![(i, 1.0)]).collect();
    }
    (0..out)
        .map(|o| {
            if scale <= 1.0 {
                let centre = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
                let i0 = centre.floor() as usize;
                let frac = centre - i0 as f64;
                let i1 = (i0 + 1).min(len - 1);
                if frac == 0.0 || i1 == i0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, (1.0 - frac) as f32), (i1, frac as f32)]
                }
            } else {
                let lo = (start + o as f64 * scale).clamp(0.0, len as f64);
                let hi = (start + (o as f64 + 1.0) * scale).clamp(0.0, len as f64);
                let first = lo.floor() as usize;
                let stop = (hi.ceil() as usize).min(len);
                let mut taps: Vec<(usize, f64)> = (first..stop)
                    .map(|i| {
                        let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (i, cover)
                    })
                    .filter(|&(_, c)| c > 0.0)
                    .collect();
                if taps.is_empty() {
                    taps.push(((lo.floor() as usize).min(len - 1), 1.0));
                }
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.into_iter().map(|(i, c)| (i, (c / total) as f32)).collect()
            }
        })
        .collect()
}

fn apply(img: &Array3<f32>, rows: &AxisWeights, cols: &AxisWeights) -> Array3<f32> {
    let (_, w, c) = img.dim();
    let mut tmp = Array3::<f32>::zeros((rows.len(), w, c));
    for (oy, taps) in rows.iter().enumerate() {
        let mut dst = tmp.index_axis_mut(Axis(0), oy);
        for &(iy, wt) in taps {
            dst.scaled_add(wt, &img.index_axis(Axis(0), iy));
        }
    }
    let mut out = Array3::<f32>::zeros((rows.len(), cols.len(), c));
    for (ox, taps) in cols.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(1), ox);
        for &(ix, wt) in taps {
            dst.scaled_add(wt, &tmp.index_axis(Axis(1), ix));
        }
    }
    out
}

/// Resizes an `H x W x C` image.
pub fn resize_image(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let rows = axis_weights(h, 0.0, h as f64, out_h);
    let cols = axis_weights(w, 0.0, w as f64, out_w);
    apply(img, &rows, &cols)
}

/// Resamples the region `bbox` of `img` onto an `out_h x out_w` grid.
pub fn crop_resize(img: &Array3<f32>, bbox: &BBox, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let rows = axis_weights(h, bbox.y1, bbox.y2, out_h);
    let cols = axis_weights(w, bbox.x1, bbox.x2, out_w);
    apply(img, &rows, &cols)
}

/// Shrinks every frame to `low_res` and enlarges it back to the clip size.
pub fn degrade_resolution(clip: &VideoClip, low_res: (usize, usize)) -> VideoClip {
    let (t, h, w, c) = clip.frames.dim();
    let (lh, lw) = low_res;
    assert!(
        (1..=h).contains(&lh) && (1..=w).contains(&lw),
        "low resolution {lh}x{lw} outside 1..={h} x 1..={w}"
    );
    if (lh, lw) == (h, w) {
        return clip.clone();
    }
    let mut frames = Array4::<f32>::zeros((t, h, w, c));
    for (i, frame) in clip.frames.outer_iter().enumerate() {
        let small = resize_image(&frame.to_owned(), lh, lw);
        frames.index_axis_mut(Axis(0), i).assign(&resize_image(&small, h, w));
    }
    VideoClip::new(frames, clip.source_indices.clone())
}
