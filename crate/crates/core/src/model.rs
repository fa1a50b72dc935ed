//! The assembled two-stream classifier.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AgeClass, NUM_CLASSES};
use crate::face_backbone::{face_matrix, zero_shift_params, FaceBackbone, FaceBackboneConfig};
use crate::fusion_head::{logit_row, ClassDistribution, FusionConfig, FusionHead, KvSource};
use crate::nn::{AttentionProbs, Eager, Exec, ParamKind, ParamStore, Scalar};
use crate::preprocessing::{FaceInput, Sample, VideoClip};
use crate::video_backbone::{patchify, AttentionRecord, PatchTokens, VideoBackbone, VideoBackboneConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video: VideoBackboneConfig,
    pub face: FaceBackboneConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            video: VideoBackboneConfig::desk(),
            face: FaceBackboneConfig::desk(),
            fusion: FusionConfig::default(),
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            video: VideoBackboneConfig::paper(),
            face: FaceBackboneConfig::paper(),
            fusion: FusionConfig::default(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.video.problems("model.");
        p.extend(self.face.problems("face."));
        p.extend(self.fusion.problems("fusion."));
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Inputs of one forward pass in the executor's element type.
#[derive(Clone, Debug)]
pub struct ModelInput<S> {
    pub patches: PatchTokens<S>,
    pub face: Array2<S>,
}

pub struct NetOutput<T, S> {
    pub main: T,
    pub support: T,
    pub q: T,
    pub kv: T,
    pub fused: T,
    pub logits: T,
    pub video_attention: AttentionRecord<S>,
    pub fusion_attention: AttentionProbs<S>,
}

/// Parameter layout of the full model; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AgeFormerNet {
    pub cfg: ModelConfig,
    pub video: VideoBackbone,
    pub face: FaceBackbone,
    pub fusion: FusionHead,
}

impl AgeFormerNet {
    /// Registers every parameter under `video.`, `face.` and `fusion.`.
    pub fn register<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = VideoBackbone::register(&cfg.video, store, "video", &mut rng)?;
        let face = FaceBackbone::register(&cfg.face, store, "face", &mut rng)?;
        let fusion = FusionHead::register(
            &cfg.fusion,
            cfg.video.embed_dim,
            cfg.face.out_dim,
            store,
            "fusion",
            &mut rng,
        )?;
        Ok(AgeFormerNet {
            cfg: cfg.clone(),
            video,
            face,
            fusion,
        })
    }

    pub fn input<S: Scalar>(&self, clip: &VideoClip, face: &FaceInput) -> Result<ModelInput<S>> {
        Ok(ModelInput {
            patches: patchify(clip, &self.cfg.video)?,
            face: face_matrix(face, &self.cfg.face)?,
        })
    }

    pub fn support_feature<S: Scalar, E: Exec<S>>(&self, e: &mut E, face: &Array2<S>) -> E::T {
        match self.cfg.fusion.kv_source {
            KvSource::Single => self.face.forward(e, face),
            KvSource::SpatialTokens => self.face.forward_tokens(e, face),
        }
    }

    pub fn forward<S: Scalar, E: Exec<S>>(&self, e: &mut E, input: &ModelInput<S>) -> Result<NetOutput<E::T, S>> {
        let (main, video_attention) = self.video.forward(e, &input.patches);
        let support = self.support_feature(e, &input.face);
        let f = self.fusion.fuse(e, &main, &support)?;
        Ok(NetOutput {
            main,
            support,
            q: f.q,
            kv: f.kv,
            fused: f.fused,
            logits: f.logits,
            video_attention,
            fusion_attention: f.attention,
        })
    }

    /// Cross-entropy of one labelled input, `1 x 1`.
    pub fn loss<S: Scalar, E: Exec<S>>(&self, e: &mut E, input: &ModelInput<S>, label: AgeClass) -> Result<E::T> {
        let out = self.forward(e, input)?;
        Ok(e.cross_entropy(&out.logits, label.index()))
    }

    /// Logits of the main stream alone: `Linear(q)`.
    pub fn main_only_logits<S: Scalar, E: Exec<S>>(&self, e: &mut E, patches: &PatchTokens<S>) -> Result<E::T> {
        let (main, _) = self.video.forward(e, patches);
        // A throwaway support row keeps the width checks in one place.
        let dummy = e.constant(Array2::zeros((1, self.cfg.face.out_dim)));
        let (q, _) = self.fusion.project_features(e, &main, &dummy)?;
        Ok(self.fusion.classify_main_only(e, &q))
    }
}

/// Zeroes every additive term on the supporting path: face-trunk shifts and
/// running means, the support projection and its norm shift, and the value
/// and output projection biases of the fusion attention.
pub fn zero_support_path_biases<S: Scalar>(store: &mut ParamStore<S>) -> usize {
    zero_shift_params(store, "face.")
        + store.zero_matching("fusion.support_", ParamKind::Bias)
        + store.zero_matching("fusion.v_proj.", ParamKind::Bias)
        + store.zero_matching("fusion.out_proj.", ParamKind::Bias)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: AgeClass,
    pub distribution: ClassDistribution,
    pub logits: [f64; NUM_CLASSES],
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let distribution = ClassDistribution::from_logits(logits);
        let mut l = [0.0; NUM_CLASSES];
        l.copy_from_slice(logits);
        Prediction {
            class: distribution.argmax(),
            distribution,
            logits: l,
        }
    }
}

/// Anything that maps a prepared sample to a prediction.
pub trait Classifier {
    fn predict_sample(&self, sample: &Sample) -> Result<Prediction>;
}

/// Model with `f32` parameters, ready for inference and training.
#[derive(Clone, Debug)]
pub struct AgeFormer {
    pub net: AgeFormerNet,
    pub store: ParamStore<f32>,
}

impl AgeFormer {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = AgeFormerNet::register(cfg, &mut store, seed)?;
        Ok(AgeFormer { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn predict(&self, clip: &VideoClip, face: &FaceInput) -> Result<Prediction> {
        Ok(self.predict_with_attention(clip, face)?.0)
    }

    pub fn predict_with_attention(&self, clip: &VideoClip, face: &FaceInput) -> Result<(Prediction, AttentionRecord<f32>)> {
        let input = self.net.input::<f32>(clip, face)?;
        let mut e = Eager::new(&self.store);
        let out = self.net.forward(&mut e, &input)?;
        Ok((Prediction::from_logits(&logit_row(&out.logits)), out.video_attention))
    }

    pub fn predict_main_only(&self, clip: &VideoClip) -> Result<Prediction> {
        let patches = patchify::<f32>(clip, &self.net.cfg.video)?;
        let mut e = Eager::new(&self.store);
        let logits = self.net.main_only_logits(&mut e, &patches)?;
        Ok(Prediction::from_logits(&logit_row(&logits)))
    }

    pub fn zero_support_path_biases(&mut self) -> usize {
        zero_support_path_biases(&mut self.store)
    }
}

impl Classifier for AgeFormer {
    fn predict_sample(&self, sample: &Sample) -> Result<Prediction> {
        self.predict(&sample.clip, &sample.face)
    }
}
