use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FACE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    RandomStart,
    CenterStart,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub frames: usize,
    pub stride: usize,
    pub mode: SamplingMode,
    pub clip_height: usize,
    pub clip_width: usize,
    pub face_size: usize,
}

impl SamplingConfig {
    /// 32 frames at stride 4, 224 x 224.
    pub fn paper() -> Self {
        SamplingConfig {
            frames: 32,
            stride: 4,
            mode: SamplingMode::RandomStart,
            clip_height: 224,
            clip_width: 224,
            face_size: FACE_SIZE,
        }
    }

    /// 8 frames at stride 4, 64 x 64.
    pub fn desk() -> Self {
        SamplingConfig {
            frames: 8,
            clip_height: 64,
            clip_width: 64,
            ..Self::paper()
        }
    }

    /// Ten frames at stride 4, used to draw face crops from each video.
    pub fn face_dataset() -> Self {
        SamplingConfig {
            frames: 10,
            ..Self::paper()
        }
    }

    pub fn with_mode(self, mode: SamplingMode) -> Self {
        SamplingConfig { mode, ..self }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        SamplingConfig { stride, ..self }
    }
}

/// Picks `cfg.frames` frame indices out of `n_frames`.
///
/// When the strided window `(frames - 1) * stride + 1` fits, the window starts
/// uniformly at random (`RandomStart`, drawn from `seed`) or centred
/// (`CenterStart`, rounding down). A video too short for the configured
/// stride uses the largest stride that fits. A video with fewer than `frames`
/// frames is read at stride 1 from frame 0 and wraps around cyclically, so
/// `n_frames = 2` gives `[0, 1, 0, 1, ...]`.
pub fn sample_frame_indices(n_frames: usize, cfg: &SamplingConfig, seed: u64) -> Vec<usize> {
    let t = cfg.frames.max(1);
    let n = n_frames.max(1);
    if n < t {
        return (0..t).map(|i| i % n).collect();
    }
    let stride = if t == 1 {
        1
    } else {
        cfg.stride.max(1).min((n - 1) / (t - 1))
    };
    let span = (t - 1) * stride + 1;
    let slack = n - span;
    let start = match cfg.mode {
        SamplingMode::CenterStart => slack / 2,
        SamplingMode::RandomStart => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=slack),
    };
    (0..t).map(|i| start + i * stride).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(frames: usize, stride: usize, mode: SamplingMode) -> SamplingConfig {
        SamplingConfig {
            frames,
            stride,
            mode,
            ..SamplingConfig::paper()
        }
    }

    #[test]
    fn exact_fit_centre() {
        let idx = sample_frame_indices(125, &cfg(32, 4, SamplingMode::CenterStart), 0);
        assert_eq!(idx, (0..32).map(|i| 4 * i).collect::<Vec<_>>());
        assert_eq!(*idx.last().unwrap(), 124);
    }

    #[test]
    fn two_frame_video_wraps() {
        let idx = sample_frame_indices(2, &cfg(32, 4, SamplingMode::RandomStart), 9);
        // Reference loop for the wrap rule.
        let mut expected = Vec::new();
        let mut f = 0;
        for _ in 0..32 {
            expected.push(f);
            f = if f + 1 == 2 { 0 } else { f + 1 };
        }
        assert_eq!(idx, expected);
        assert_eq!(&idx[..4], &[0, 1, 0, 1]);
    }

    #[test]
    fn random_start_is_seeded() {
        let c = cfg(32, 4, SamplingMode::RandomStart);
        assert_eq!(sample_frame_indices(200, &c, 5), sample_frame_indices(200, &c, 5));
    }

    #[test]
    fn short_video_shrinks_stride() {
        let idx = sample_frame_indices(100, &cfg(32, 4, SamplingMode::CenterStart), 0);
        assert_eq!(idx[1] - idx[0], 3);
        assert!(*idx.last().unwrap() < 100);
    }

    proptest! {
        #[test]
        fn indices_in_range_and_dewrap_increasing(
            n in 1usize..400, t in 1usize..40, stride in 1usize..9, seed in any::<u64>(), centred in any::<bool>()
        ) {
            let mode = if centred { SamplingMode::CenterStart } else { SamplingMode::RandomStart };
            let idx = sample_frame_indices(n, &cfg(t, stride, mode), seed);
            prop_assert_eq!(idx.len(), t);
            prop_assert!(idx.iter().all(|&i| i < n));
            let mut offset = 0;
            let mut prev: Option<usize> = None;
            for &i in &idx {
                if let Some(p) = prev {
                    if i + offset <= p {
                        offset += n;
                    }
                    prop_assert!(i + offset > p);
                }
                prev = Some(i + offset);
            }
        }

        #[test]
        fn face_dataset_variant_keeps_stride(n in 37usize..500, seed in any::<u64>()) {
            let idx = sample_frame_indices(n, &SamplingConfig::face_dataset(), seed);
            prop_assert_eq!(idx.len(), 10);
            prop_assert!(idx.windows(2).all(|w| w[1] - w[0] == 4));
        }
    }
}
