//! Eye-landmark face alignment.
//!
//! A similarity transform `z' = a z + b` (complex `a`, `b`; points as
//! `x + iy`) maps the left and right eye onto fixed targets in the output
//! crop. Each output pixel centre is mapped back into the frame and sampled
//! bilinearly with edge clamping.

use ndarray::Array3;

use super::FaceInput;
use crate::datamodel::BBox;
use crate::{Error, Result};

/// Target eye positions as fractions of the output width and height.
pub const LEFT_EYE_TARGET: [f64; 2] = [0.35, 0.40];
pub const RIGHT_EYE_TARGET: [f64; 2] = [0.65, 0.40];

/// Eyes closer than this (in source pixels) cannot define an alignment.
pub const MIN_EYE_DISTANCE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    /// `a = s (cos r + i sin r)`.
    pub a: [f64; 2],
    pub b: [f64; 2],
}

fn cmul(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [p[0] * q[0] - p[1] * q[1], p[0] * q[1] + p[1] * q[0]]
}

fn cdiv(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let n = q[0] * q[0] + q[1] * q[1];
    [(p[0] * q[0] + p[1] * q[1]) / n, (p[1] * q[0] - p[0] * q[1]) / n]
}

fn csub(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [p[0] - q[0], p[1] - q[1]]
}

impl SimilarityTransform {
    /// The transform taking `src[0] -> dst[0]` and `src[1] -> dst[1]`.
    pub fn from_pairs(src: [[f64; 2]; 2], dst: [[f64; 2]; 2]) -> Result<Self> {
        let ds = csub(src[1], src[0]);
        let dist = ds[0].hypot(ds[1]);
        if !(dist >= MIN_EYE_DISTANCE) {
            return Err(Error::Alignment(format!(
                "eye distance {dist:.3} px is below {MIN_EYE_DISTANCE} px"
            )));
        }
        let a = cdiv(csub(dst[1], dst[0]), ds);
        let b = csub(dst[0], cmul(a, src[0]));
        Ok(SimilarityTransform { a, b })
    }

    /// Transform aligning `eyes` to the canonical targets of an
    /// `out_h x out_w` crop.
    pub fn for_eyes(eyes: [[f64; 2]; 2], out_h: usize, out_w: usize) -> Result<Self> {
        let (w, h) = (out_w as f64, out_h as f64);
        let dst = [
            [LEFT_EYE_TARGET[0] * w, LEFT_EYE_TARGET[1] * h],
            [RIGHT_EYE_TARGET[0] * w, RIGHT_EYE_TARGET[1] * h],
        ];
        Self::from_pairs(eyes, dst)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let z = cmul(self.a, p);
        [z[0] + self.b[0], z[1] + self.b[1]]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        cdiv(csub(p, self.b), self.a)
    }

    pub fn scale(&self) -> f64 {
        self.a[0].hypot(self.a[1])
    }

    pub fn rotation(&self) -> f64 {
        self.a[1].atan2(self.a[0])
    }
}

/// Bilinear sample at continuous coordinate `(x, y)` (pixel centres at
/// half-integers), clamping to the border.
fn sample_bilinear(img: &Array3<f32>, x: f64, y: f64, out: &mut [f32]) {
    let (h, w, c) = img.dim();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = (fx - x0 as f64) as f32;
    let ay = (fy - y0 as f64) as f32;
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let top = img[[y0, x0, ch]] * (1.0 - ax) + img[[y0, x1, ch]] * ax;
        let bottom = img[[y1, x0, ch]] * (1.0 - ax) + img[[y1, x1, ch]] * ax;
        *o = top * (1.0 - ay) + bottom * ay;
    }
}

/// Aligns a face so its eyes land on the canonical targets of an
/// `out_size.0 x out_size.1` crop. `bbox` must lie in the frame and contain
/// both eyes.
pub fn align_face_crop(
    frame: &Array3<f32>,
    bbox: &BBox,
    eyes: [[f64; 2]; 2],
    out_size: (usize, usize),
) -> Result<FaceInput> {
    let (h, w, c) = frame.dim();
    let (out_h, out_w) = out_size;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot align {h}x{w} frame to {out_h}x{out_w}")));
    }
    if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > w as f64 || bbox.y2 > h as f64 {
        return Err(Error::Alignment(format!("face box {bbox:?} outside {w}x{h} frame")));
    }
    if !eyes.iter().all(|&e| bbox.contains(e)) {
        return Err(Error::Alignment("eye landmarks outside face box".into()));
    }
    let xf = SimilarityTransform::for_eyes(eyes, out_h, out_w)?;
    let mut pixels = Array3::<f32>::zeros((out_h, out_w, c));
    let mut px = vec![0f32; c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let src = xf.invert([ox as f64 + 0.5, oy as f64 + 0.5]);
            sample_bilinear(frame, src[0], src[1], &mut px);
            for (ch, &v) in px.iter().enumerate() {
                pixels[[oy, ox, ch]] = v;
            }
        }
    }
    Ok(FaceInput::present(pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocessing::resize::crop_resize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((h, w, 3), || rng.gen::<f32>())
    }

    #[test]
    fn canonical_eyes_reproduce_plain_resize() {
        let frame = random_frame(120, 140, 1);
        let bbox = BBox::new(30.0, 20.0, 102.0, 92.0);
        let side = bbox.width();
        let eyes = [
            [bbox.x1 + 0.35 * side, bbox.y1 + 0.40 * side],
            [bbox.x1 + 0.65 * side, bbox.y1 + 0.40 * side],
        ];
        let face = align_face_crop(&frame, &bbox, eyes, (288, 288)).unwrap();
        assert!(face.present);
        let plain = crop_resize(&frame, &bbox, 288, 288);
        let max_diff = face
            .pixels
            .iter()
            .zip(plain.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn rotated_eyes_become_horizontal() {
        // Eyes stacked vertically: a 90 degree roll of the head.
        let eyes = [[50.0, 40.0], [50.0, 70.0]];
        let xf = SimilarityTransform::for_eyes(eyes, 288, 288).unwrap();
        let l = xf.apply(eyes[0]);
        let r = xf.apply(eyes[1]);
        assert!((l[1] - r[1]).abs() < 0.5);
        assert!((l[0] - 0.35 * 288.0).abs() < 1e-9 && (r[0] - 0.65 * 288.0).abs() < 1e-9);
        assert!((xf.rotation().abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

        let frame = random_frame(100, 100, 2);
        let bbox = BBox::new(30.0, 25.0, 75.0, 85.0);
        let face = align_face_crop(&frame, &bbox, eyes, (288, 288)).unwrap();
        assert_eq!(face.pixels.dim(), (288, 288, 3));
    }

    #[test]
    fn coincident_eyes_rejected() {
        let frame = random_frame(50, 50, 3);
        let bbox = BBox::new(10.0, 10.0, 40.0, 40.0);
        let err = align_face_crop(&frame, &bbox, [[20.0, 20.0], [20.0, 20.0]], (288, 288));
        assert!(matches!(err, Err(Error::Alignment(_))));
        let err = align_face_crop(&frame, &bbox, [[20.0, 20.0], [21.5, 20.0]], (288, 288));
        assert!(matches!(err, Err(Error::Alignment(_))));
    }

    #[test]
    fn inverse_round_trip() {
        let xf = SimilarityTransform::from_pairs([[3.0, 4.0], [10.0, -2.0]], [[0.0, 0.0], [5.0, 5.0]]).unwrap();
        for p in [[1.0, 2.0], [-7.5, 3.25], [100.0, 0.0]] {
            let q = xf.invert(xf.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
    }
}
