//! Cross-attention fusion of the two stream features and the classifier.
//!
//! Both features are projected (`linear -> dropout -> layer norm`) to
//! `fused_dim`. The main projection `q` supplies the query; the support
//! projection supplies keys and values, either as one token (the pooled face
//! feature) or as one token per position of the face feature map. The logits
//! are `Linear(q + fused)`.
//!
//! With a single key/value token every attention weight is exactly 1, so the
//! fused vector does not depend on `q` at all.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AgeClass, NUM_CLASSES};
use crate::nn::{AttentionGroup, AttentionLayout, AttentionProbs, Exec, ParamStore, Scalar};
use crate::video_backbone::{add_linear, add_norm, LinearIds, NormIds, INIT_STD};
use crate::{Error, Result};

pub const FUSION_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvSource {
    /// The pooled support feature as the only key/value token.
    Single,
    /// Every position of the support feature map as a key/value token.
    SpatialTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub fused_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub kv_source: KvSource,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            fused_dim: 512,
            heads: 8,
            dropout: 0.1,
            num_classes: NUM_CLASSES,
            kv_source: KvSource::Single,
        }
    }
}

impl FusionConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.fused_dim == 0 || self.heads == 0 {
            out.push(format!("{prefix}fused_dim/heads: must be >= 1"));
        } else if self.fused_dim % self.heads != 0 {
            out.push(format!(
                "{prefix}heads: fused_dim {} is not divisible by {} heads",
                self.fused_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("{prefix}dropout: {} is outside [0, 1)", self.dropout));
        }
        if self.num_classes != NUM_CLASSES {
            out.push(format!("{prefix}num_classes: must be {NUM_CLASSES}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("fusion.");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Class probabilities of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: [f64; NUM_CLASSES],
}

impl ClassDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        assert_eq!(logits.len(), NUM_CLASSES);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let mut probs = [0.0; NUM_CLASSES];
        for (p, e) in probs.iter_mut().zip(&exp) {
            *p = e / sum;
        }
        ClassDistribution { probs }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> AgeClass {
        argmax(&self.probs)
    }
}

/// Index of the largest value, the first one on ties.
pub fn argmax(values: &[f64]) -> AgeClass {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    AgeClass::from_index(best).expect("class index")
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub cfg: FusionConfig,
    pub main_proj: LinearIds,
    pub main_norm: NormIds,
    pub support_proj: LinearIds,
    pub support_norm: NormIds,
    pub q_proj: LinearIds,
    pub k_proj: LinearIds,
    pub v_proj: LinearIds,
    pub out_proj: LinearIds,
    pub classifier: LinearIds,
}

/// Outputs of [`FusionHead::fuse`].
pub struct Fused<T, S> {
    pub q: T,
    pub kv: T,
    pub fused: T,
    pub logits: T,
    /// One `1 x tokens` weight row per head.
    pub attention: AttentionProbs<S>,
}

impl FusionHead {
    pub fn register<S: Scalar, R: Rng>(
        cfg: &FusionConfig,
        main_dim: usize,
        support_dim: usize,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.fused_dim;
        let lin = |store: &mut ParamStore<S>, name: &str, i: usize, o: usize, rng: &mut R| {
            add_linear(store, &format!("{prefix}.{name}"), i, o, INIT_STD, rng)
        };
        Ok(FusionHead {
            cfg: cfg.clone(),
            main_proj: lin(store, "main_proj", main_dim, d, rng),
            main_norm: add_norm(store, &format!("{prefix}.main_norm"), d),
            support_proj: lin(store, "support_proj", support_dim, d, rng),
            support_norm: add_norm(store, &format!("{prefix}.support_norm"), d),
            q_proj: lin(store, "q_proj", d, d, rng),
            k_proj: lin(store, "k_proj", d, d, rng),
            v_proj: lin(store, "v_proj", d, d, rng),
            out_proj: lin(store, "out_proj", d, d, rng),
            classifier: lin(store, "classifier", d, cfg.num_classes, rng),
        })
    }

    fn project<S: Scalar, E: Exec<S>>(&self, e: &mut E, x: &E::T, lin: LinearIds, norm: NormIds) -> E::T {
        let y = e.linear(x, lin.w, Some(lin.b));
        let y = e.dropout(&y, self.cfg.dropout);
        e.layer_norm(&y, norm.gain, norm.shift, FUSION_LN_EPS)
    }

    fn check_width<S: Scalar, E: Exec<S>>(e: &E, x: &E::T, lin: LinearIds, what: &str) -> Result<()> {
        let want = e.store().get(lin.w).nrows();
        let got = e.value(x).ncols();
        if got != want {
            return Err(Error::Config(format!("{what} feature has {got} dims, expected {want}")));
        }
        Ok(())
    }

    /// `(q, kv)`: the projected main feature (`1 x d`) and support tokens
    /// (`m x d`).
    pub fn project_features<S: Scalar, E: Exec<S>>(&self, e: &mut E, main: &E::T, support: &E::T) -> Result<(E::T, E::T)> {
        Self::check_width(e, main, self.main_proj, "main-stream")?;
        Self::check_width(e, support, self.support_proj, "support-stream")?;
        let q = self.project(e, main, self.main_proj, self.main_norm);
        let kv = self.project(e, support, self.support_proj, self.support_norm);
        Ok((q, kv))
    }

    /// Multi-head attention of the single query `q` over the `kv` tokens,
    /// followed by the output projection.
    pub fn mha_fuse<S: Scalar, E: Exec<S>>(&self, e: &mut E, q: &E::T, kv: &E::T) -> (E::T, AttentionProbs<S>) {
        let m = e.value(kv).nrows();
        let layout = Arc::new(AttentionLayout {
            groups: vec![AttentionGroup {
                queries: vec![0],
                keys: (0..m).collect(),
            }],
            row_weight: vec![1.0],
            heads: self.cfg.heads,
        });
        let qh = e.linear(q, self.q_proj.w, Some(self.q_proj.b));
        let kh = e.linear(kv, self.k_proj.w, Some(self.k_proj.b));
        let vh = e.linear(kv, self.v_proj.w, Some(self.v_proj.b));
        let (a, probs) = e.attention(&qh, &kh, &vh, &layout);
        (e.linear(&a, self.out_proj.w, Some(self.out_proj.b)), probs)
    }

    /// `Linear(q + fused)`.
    pub fn classify<S: Scalar, E: Exec<S>>(&self, e: &mut E, q: &E::T, fused: &E::T) -> E::T {
        let s = e.add(q, fused);
        e.linear(&s, self.classifier.w, Some(self.classifier.b))
    }

    /// `Linear(q)`: the prediction when the support path contributes nothing.
    pub fn classify_main_only<S: Scalar, E: Exec<S>>(&self, e: &mut E, q: &E::T) -> E::T {
        e.linear(q, self.classifier.w, Some(self.classifier.b))
    }

    pub fn fuse<S: Scalar, E: Exec<S>>(&self, e: &mut E, main: &E::T, support: &E::T) -> Result<Fused<E::T, S>> {
        let (q, kv) = self.project_features(e, main, support)?;
        let (fused, attention) = self.mha_fuse(e, &q, &kv);
        let logits = self.classify(e, &q, &fused);
        Ok(Fused {
            q,
            kv,
            fused,
            logits,
            attention,
        })
    }
}

/// Row `0` of a `1 x C` logit matrix as `f64`.
pub fn logit_row<S: Scalar>(x: &Array2<S>) -> Vec<f64> {
    x.row(0).iter().map(|v| v.as_f64()).collect()
}
