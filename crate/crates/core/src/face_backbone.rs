//! Supporting stream: a strided convolutional trunk over the aligned face crop.
//!
//! Every stage is `conv (no bias) -> frozen-statistics channel norm -> SiLU`;
//! the trunk ends with a global average pool and a linear map to `out_dim`.
//! The zero face placeholder goes through exactly the same path.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{ChannelNormIds, ConvGeometry, Eager, Exec, Init, ParamId, ParamKind, ParamStore, Scalar};
use crate::preprocessing::{FaceInput, FACE_SIZE};
use crate::video_backbone::{add_linear, LinearIds};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvStage {
    pub const fn new(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvStage {
            channels,
            kernel,
            stride,
            pad,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBackboneConfig {
    pub input_size: usize,
    pub stages: Vec<ConvStage>,
    pub out_dim: usize,
}

impl FaceBackboneConfig {
    /// Three stages down to a 9 x 9 map, 64-dim feature.
    pub fn desk() -> Self {
        FaceBackboneConfig {
            input_size: FACE_SIZE,
            stages: vec![ConvStage::new(16, 8, 8, 0), ConvStage::new(32, 3, 2, 1), ConvStage::new(64, 3, 2, 1)],
            out_dim: 64,
        }
    }

    /// Stage widths of a compact mobile-style trunk, 1408-dim feature.
    pub fn paper() -> Self {
        FaceBackboneConfig {
            input_size: FACE_SIZE,
            stages: vec![
                ConvStage::new(32, 3, 2, 1),
                ConvStage::new(48, 3, 2, 1),
                ConvStage::new(88, 3, 2, 1),
                ConvStage::new(120, 3, 2, 1),
                ConvStage::new(208, 3, 2, 1),
                ConvStage::new(352, 1, 1, 0),
            ],
            out_dim: 1408,
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.out_dim == 0 {
            out.push(format!("{prefix}out_dim: must be >= 1"));
        }
        if self.stages.is_empty() {
            out.push(format!("{prefix}stages: at least one stage is required"));
        }
        let mut size = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                out.push(format!("{prefix}stages.{i}: channels, kernel and stride must be >= 1"));
                return out;
            }
            if size + 2 * s.pad < s.kernel {
                out.push(format!("{prefix}stages.{i}: kernel {} larger than the {size} px input", s.kernel));
                return out;
            }
            size = (size + 2 * s.pad - s.kernel) / s.stride + 1;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("face.");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Convolution geometry of every stage.
    pub fn geometries(&self) -> Vec<ConvGeometry> {
        let mut size = self.input_size;
        let mut in_c = 3;
        self.stages
            .iter()
            .map(|s| {
                let g = ConvGeometry {
                    in_h: size,
                    in_w: size,
                    in_c,
                    out_c: s.channels,
                    kernel: s.kernel,
                    stride: s.stride,
                    pad: s.pad,
                };
                size = g.out_h();
                in_c = s.channels;
                g
            })
            .collect()
    }

    /// Side of the final feature map.
    pub fn final_size(&self) -> usize {
        self.geometries().last().map_or(self.input_size, |g| g.out_h())
    }
}

#[derive(Clone, Debug)]
pub struct FaceStage {
    pub conv: ParamId,
    pub geom: ConvGeometry,
    pub norm: ChannelNormIds,
}

#[derive(Clone, Debug)]
pub struct FaceBackbone {
    pub cfg: FaceBackboneConfig,
    pub stages: Vec<FaceStage>,
    pub head: LinearIds,
}

/// `(H W) x 3` raster-order matrix of a face input.
pub fn face_matrix<S: Scalar>(face: &FaceInput, cfg: &FaceBackboneConfig) -> Result<Array2<S>> {
    let (h, w, c) = face.pixels.dim();
    if (h, w, c) != (cfg.input_size, cfg.input_size, 3) {
        return Err(Error::Config(format!(
            "face input {h}x{w}x{c} does not match the configured {0}x{0}x3",
            cfg.input_size
        )));
    }
    let flat = face.pixels.as_standard_layout();
    Ok(Array2::from_shape_vec((h * w, 3), flat.iter().map(|&v| S::lit(v as f64)).collect()).expect("shape"))
}

impl FaceBackbone {
    pub fn register<S: Scalar, R: Rng>(
        cfg: &FaceBackboneConfig,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg
            .geometries()
            .into_iter()
            .enumerate()
            .map(|(i, geom)| {
                let base = format!("{prefix}.stages.{i}");
                let fan_in = geom.patch_len();
                let conv = store.add(
                    format!("{base}.conv.w"),
                    Init::kaiming(fan_in, geom.out_c, fan_in, rng),
                    ParamKind::Weight,
                );
                let c = geom.out_c;
                let norm = ChannelNormIds {
                    gain: store.add(format!("{base}.norm.g"), Init::ones(1, c), ParamKind::Gain),
                    shift: store.add(format!("{base}.norm.b"), Init::zeros(1, c), ParamKind::Bias),
                    running_mean: store.add(format!("{base}.norm.running_mean"), Init::zeros(1, c), ParamKind::Buffer),
                    running_var: store.add(format!("{base}.norm.running_var"), Init::ones(1, c), ParamKind::Buffer),
                };
                FaceStage { conv, geom, norm }
            })
            .collect::<Vec<_>>();
        let last = cfg.stages.last().expect("validated").channels;
        let head = add_linear(store, &format!("{prefix}.head"), last, cfg.out_dim, (1.0 / last as f64).sqrt(), rng);
        Ok(FaceBackbone {
            cfg: cfg.clone(),
            stages,
            head,
        })
    }

    /// Final feature map, `(s s) x channels`.
    pub fn trunk<S: Scalar, E: Exec<S>>(&self, e: &mut E, face: &Array2<S>) -> E::T {
        let mut x = e.constant(face.clone());
        for st in &self.stages {
            let y = e.conv2d(&x, st.conv, None, st.geom);
            let y = e.channel_norm(&y, st.norm);
            x = e.silu(&y);
        }
        x
    }

    /// Pooled feature, `1 x out_dim`.
    pub fn forward<S: Scalar, E: Exec<S>>(&self, e: &mut E, face: &Array2<S>) -> E::T {
        let map = self.trunk(e, face);
        let pooled = e.mean_rows(&map);
        e.linear(&pooled, self.head.w, Some(self.head.b))
    }

    /// The head applied to every position of the final map,
    /// `(s s) x out_dim`; its row mean equals [`Self::forward`].
    pub fn forward_tokens<S: Scalar, E: Exec<S>>(&self, e: &mut E, face: &Array2<S>) -> E::T {
        let map = self.trunk(e, face);
        e.linear(&map, self.head.w, Some(self.head.b))
    }

    pub fn infer(&self, store: &ParamStore<f32>, face: &FaceInput) -> Result<Array1<f32>> {
        let x = face_matrix::<f32>(face, &self.cfg)?;
        let mut e = Eager::new(store);
        Ok(self.forward(&mut e, &x).row(0).to_owned())
    }
}

/// Sets every bias and channel-norm offset (shift and running mean) under
/// `prefix` to zero. Returns the number of tensors touched.
pub fn zero_shift_params<S: Scalar>(store: &mut ParamStore<S>, prefix: &str) -> usize {
    let mut n = store.zero_matching(prefix, ParamKind::Bias);
    let means: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix) && store.name(id).ends_with(".running_mean"))
        .collect();
    for id in means {
        store.get_mut(id).fill(S::zero());
        n += 1;
    }
    n
}

/// Feature of one face input; see [`FaceBackbone::infer`].
pub fn face_forward(face: &FaceInput, backbone: &FaceBackbone, store: &ParamStore<f32>) -> Result<Array1<f32>> {
    backbone.infer(store, face)
}
