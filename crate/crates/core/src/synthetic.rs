//! Procedurally rendered walking figures whose body scale and gait frequency
//! are set by the age class. Used as a stand-in dataset for tests and demos.
//!
//! A video is addressed by a path of the form
//! `synth:class=<0-3>,seed=<u64>,frames=<n>,width=<w>,height=<h>`; the frames
//! are re-rendered on demand, so no pixel data is stored.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{AgeClass, BBox, DatasetManifest, FaceAnnotation, VideoRecord};
use crate::{Error, Result};

pub const SYNTH_PREFIX: &str = "synth:";

/// Figure height as a fraction of frame height, per class.
const BODY_SCALE: [f64; 4] = [0.32, 0.52, 0.70, 0.84];
/// Gait cycles per source frame, per class.
const GAIT_FREQ: [f64; 4] = [0.11, 0.075, 0.05, 0.025];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub class: AgeClass,
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{SYNTH_PREFIX}class={},seed={},frames={},width={},height={}",
            self.class.index(),
            self.seed,
            self.frames,
            self.width,
            self.height
        )
    }
}

impl SynthSpec {
    pub fn parse(path: &str) -> Result<Self> {
        let body = path
            .strip_prefix(SYNTH_PREFIX)
            .ok_or_else(|| Error::Decode(format!("not a synthetic path: {path}")))?;
        let mut spec = SynthSpec {
            class: AgeClass::Adult,
            seed: 0,
            frames: 32,
            width: 64,
            height: 64,
        };
        for kv in body.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Decode(format!("bad synthetic field '{kv}' in {path}")))?;
            let num = |v: &str| -> Result<u64> {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Decode(format!("bad value '{v}' for '{k}' in {path}")))
            };
            match k.trim() {
                "class" => {
                    spec.class = AgeClass::from_index(num(v)? as usize)
                        .ok_or_else(|| Error::Decode(format!("class out of range in {path}")))?
                }
                "seed" => spec.seed = num(v)?,
                "frames" => spec.frames = num(v)? as usize,
                "width" => spec.width = num(v)? as usize,
                "height" => spec.height = num(v)? as usize,
                other => return Err(Error::Decode(format!("unknown synthetic field '{other}' in {path}"))),
            }
        }
        if spec.frames == 0 || spec.width < 8 || spec.height < 8 {
            return Err(Error::Decode(format!("degenerate synthetic video {path}")));
        }
        Ok(spec)
    }
}

/// Per-video constants drawn from the seed.
#[derive(Clone, Debug)]
struct Scene {
    background: [f32; 3],
    texture: [f32; 3],
    body_color: [f32; 3],
    skin: [f32; 3],
    body_h: f64,
    x0: f64,
    speed: f64,
    freq: f64,
    phase: f64,
    noise_seed: u64,
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn hash_unit(seed: u64, x: u64, y: u64, t: u64) -> f32 {
    let mut z = seed ^ x.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ y.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ t.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

/// Figure geometry at one frame, in pixels.
struct Pose {
    head_c: [f64; 2],
    head_r: f64,
    limbs: Vec<([f64; 2], [f64; 2])>,
    limb_w: f64,
    eyes: [[f64; 2]; 2],
}

pub struct SynthVideo {
    pub spec: SynthSpec,
    scene: Scene,
}

impl SynthVideo {
    pub fn new(spec: SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_F00D);
        let c = spec.class.index();
        // Light backdrop, dark clothing: the figure always stands out, so
        // scale and gait are the only things that vary with the class.
        let mut color = |lo: f32, hi: f32| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let background = color(0.55, 0.9);
        let texture = color(0.55, 0.9);
        let body_color = color(0.05, 0.35);
        let skin = lerp3([0.95, 0.8, 0.65], [0.45, 0.3, 0.2], rng.gen::<f32>());
        let body_h = BODY_SCALE[c] * (1.0 + rng.gen_range(-0.06..0.06)) * spec.height as f64;
        let w = spec.width as f64;
        let x0 = rng.gen_range(0.3..0.7) * w;
        let speed = rng.gen_range(-0.15..0.15) * w / spec.frames.max(1) as f64;
        let freq = GAIT_FREQ[c] * (1.0 + rng.gen_range(-0.1..0.1));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let noise_seed = rng.gen();
        SynthVideo {
            spec,
            scene: Scene {
                background,
                texture,
                body_color,
                skin,
                body_h,
                x0,
                speed,
                freq,
                phase,
                noise_seed,
            },
        }
    }

    pub fn from_path(path: &str) -> Result<Self> {
        SynthSpec::parse(path).map(Self::new)
    }

    fn pose(&self, t: usize) -> Pose {
        let s = &self.scene;
        let hgt = self.spec.height as f64;
        let cx = s.x0 + s.speed * t as f64;
        let feet_y = 0.94 * hgt;
        let bh = s.body_h;
        let head_r = 0.11 * bh;
        let swing = (std::f64::consts::TAU * s.freq * t as f64 + s.phase).sin();
        let bob = 0.02 * bh * (2.0 * std::f64::consts::TAU * s.freq * t as f64 + s.phase).cos().abs();
        let top = feet_y - bh - bob;
        let head_c = [cx, top + head_r];
        let neck = [cx, top + 2.0 * head_r];
        let hip = [cx, feet_y - 0.47 * bh - bob];
        let leg = 0.47 * bh;
        let ang = 0.45 * swing;
        let foot_a = [hip[0] + leg * ang.sin(), hip[1] + leg * ang.cos()];
        let foot_b = [hip[0] - leg * ang.sin(), hip[1] + leg * ang.cos()];
        let shoulder = [cx, neck[1] + 0.05 * bh];
        let arm = 0.33 * bh;
        let hand_a = [shoulder[0] - arm * (0.8 * ang).sin(), shoulder[1] + arm * (0.8 * ang).cos()];
        let hand_b = [shoulder[0] + arm * (0.8 * ang).sin(), shoulder[1] + arm * (0.8 * ang).cos()];
        let eye_dx = 0.42 * head_r;
        let eye_y = head_c[1] - 0.1 * head_r;
        Pose {
            head_c,
            head_r,
            limbs: vec![(neck, hip), (hip, foot_a), (hip, foot_b), (shoulder, hand_a), (shoulder, hand_b)],
            limb_w: (0.045 * bh).max(0.8),
            eyes: [[cx - eye_dx, eye_y], [cx + eye_dx, eye_y]],
        }
    }

    pub fn render(&self, t: usize) -> Array3<f32> {
        let (h, w) = (self.spec.height, self.spec.width);
        let s = &self.scene;
        let pose = self.pose(t);
        let eye_r = (0.14 * pose.head_r).max(0.5);
        let mut img = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let n = hash_unit(s.noise_seed, x as u64 / 4, y as u64 / 4, 0);
                let jitter = 0.04 * (hash_unit(s.noise_seed, x as u64, y as u64, t as u64 + 1) - 0.5);
                let mut c = lerp3(s.background, s.texture, 0.35 * n);
                if pose.limbs.iter().any(|&(a, b)| dist_to_segment(p, a, b) <= pose.limb_w) {
                    c = s.body_color;
                }
                let dh = (p[0] - pose.head_c[0]).hypot(p[1] - pose.head_c[1]);
                if dh <= pose.head_r {
                    c = s.skin;
                    if pose.eyes.iter().any(|e| (p[0] - e[0]).hypot(p[1] - e[1]) <= eye_r) {
                        c = [0.05, 0.05, 0.08];
                    }
                }
                for ch in 0..3 {
                    img[[y, x, ch]] = (c[ch] + jitter).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Face annotation at frame `t`, if the head is large enough to align.
    pub fn face(&self, t: usize) -> Option<FaceAnnotation> {
        let pose = self.pose(t);
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let r = pose.head_r;
        let bbox = BBox::new(
            (pose.head_c[0] - r).max(0.0),
            (pose.head_c[1] - r).max(0.0),
            (pose.head_c[0] + r).min(w),
            (pose.head_c[1] + r).min(h),
        );
        let eye_dist = pose.eyes[1][0] - pose.eyes[0][0];
        (eye_dist >= 4.0 && pose.eyes.iter().all(|&e| bbox.contains(e))).then_some(FaceAnnotation {
            bbox,
            eyes: pose.eyes,
        })
    }

    /// Tight box around the figure at frame `t`.
    pub fn person_box(&self, t: usize) -> BBox {
        let pose = self.pose(t);
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let mut xs = vec![pose.head_c[0] - pose.head_r, pose.head_c[0] + pose.head_r];
        let mut ys = vec![pose.head_c[1] - pose.head_r];
        for (a, b) in &pose.limbs {
            xs.extend([a[0], b[0]]);
            ys.extend([a[1], b[1]]);
        }
        let pad = pose.limb_w;
        let x1 = (xs.iter().cloned().fold(f64::INFINITY, f64::min) - pad).clamp(0.0, w - 1.0);
        let x2 = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad).clamp(x1 + 1.0, w);
        let y1 = (ys.iter().cloned().fold(f64::INFINITY, f64::min) - pad).clamp(0.0, h - 1.0);
        let y2 = (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad).clamp(y1 + 1.0, h);
        BBox::new(x1, y1, x2, y2)
    }
}

#[derive(Clone, Debug)]
pub struct SynthDatasetConfig {
    pub per_class: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Every `no_face_every`-th video of a class has no face annotations
    /// (0 disables).
    pub no_face_every: usize,
    pub with_person_boxes: bool,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            per_class: 8,
            frames: 40,
            width: 64,
            height: 64,
            seed: 0,
            no_face_every: 5,
            with_person_boxes: false,
        }
    }
}

/// Manifest of synthetic videos with face annotations drawn from the
/// renderer itself.
pub fn synthetic_manifest(cfg: &SynthDatasetConfig) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for class in AgeClass::ALL {
        for i in 0..cfg.per_class {
            let seed = cfg
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((class.index() * 100_000 + i) as u64);
            let spec = SynthSpec {
                class,
                seed,
                frames: cfg.frames,
                width: cfg.width,
                height: cfg.height,
            };
            let video = SynthVideo::new(spec);
            let mut rec = VideoRecord::new(
                format!("synth-{}-{i:04}", class.name()),
                spec.to_string(),
                class,
                cfg.frames,
                25.0,
            );
            rec.width = Some(cfg.width as u32);
            rec.height = Some(cfg.height as u32);
            let faceless = cfg.no_face_every > 0 && i % cfg.no_face_every == cfg.no_face_every - 1;
            if !faceless {
                let faces: BTreeMap<usize, FaceAnnotation> =
                    (0..cfg.frames).filter_map(|t| video.face(t).map(|f| (t, f))).collect();
                rec.face_boxes = faces;
            }
            if cfg.with_person_boxes {
                rec.person_boxes = (0..cfg.frames).map(|t| (t, video.person_box(t))).collect();
            }
            records.push(rec);
        }
    }
    DatasetManifest::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_round_trip() {
        let spec = SynthSpec {
            class: AgeClass::Elderly,
            seed: 42,
            frames: 17,
            width: 48,
            height: 40,
        };
        assert_eq!(SynthSpec::parse(&spec.to_string()).unwrap(), spec);
        assert!(SynthSpec::parse("synth:class=9").is_err());
        assert!(SynthSpec::parse("synth:colour=1").is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let v = SynthVideo::from_path("synth:class=1,seed=3,frames=10,width=32,height=32").unwrap();
        let a = v.render(4);
        assert_eq!(a, v.render(4));
        assert_ne!(a, v.render(5));
        assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn body_scale_orders_classes() {
        let heights: Vec<f64> = AgeClass::ALL
            .iter()
            .map(|&class| {
                let v = SynthVideo::new(SynthSpec {
                    class,
                    seed: 1,
                    frames: 8,
                    width: 64,
                    height: 64,
                });
                v.person_box(0).height()
            })
            .collect();
        assert!(heights.windows(2).all(|p| p[0] < p[1]), "{heights:?}");
    }

    #[test]
    fn manifest_is_valid() {
        let m = synthetic_manifest(&SynthDatasetConfig {
            with_person_boxes: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(m.class_counts(), [8, 8, 8, 8]);
        assert!(m.records.iter().any(|r| !r.has_faces()));
        assert!(m.records.iter().any(|r| r.has_faces()));
    }
}
