use std::sync::Arc;

use ndarray::Array2;

use super::{ParamId, ParamStore, Scalar};

/// One softmax domain of a grouped attention: the query rows it updates and
/// the key/value rows they attend over.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Grouped multi-head scaled dot-product attention.
///
/// Query row `r` receives `row_weight[r]` times the attention output of every
/// group that lists it as a query. Rows that appear in no group produce zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub groups: Vec<AttentionGroup>,
    pub row_weight: Vec<f64>,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn query_rows(&self) -> usize {
        self.row_weight.len()
    }

    /// Index into [`AttentionProbs`] for a group and head.
    pub fn slot(&self, group: usize, head: usize) -> usize {
        group * self.heads + head
    }
}

/// Attention weights of one attention call, `[group * heads + head]`, each
/// `queries.len() x keys.len()`.
pub type AttentionProbs<S> = Vec<Array2<S>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

/// Per-channel normalization with frozen statistics:
/// `y = (x - mean) * gain / sqrt(var + eps) + shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelNormIds {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const CHANNEL_NORM_EPS: f64 = 1e-5;

/// The operations a forward pass is written against. [`super::Eager`]
/// evaluates directly; [`super::Graph`] also records what is needed for
/// reverse-mode gradients. All activations are 2-D: tokens are rows, feature
/// maps are `(h*w) x channels` in raster order.
pub trait Exec<S: Scalar> {
    type T: Clone;

    fn store(&self) -> &ParamStore<S>;
    fn training(&self) -> bool;
    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Array2<S>;

    fn constant(&mut self, x: Array2<S>) -> Self::T;
    fn param(&mut self, id: ParamId) -> Self::T;

    /// `x W (+ b)`, with `W` stored `in x out` and `b` as `1 x out`.
    fn linear(&mut self, x: &Self::T, w: ParamId, b: Option<ParamId>) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn gather_rows(&mut self, x: &Self::T, rows: &[usize]) -> Self::T;
    fn concat_rows(&mut self, parts: &[&Self::T]) -> Self::T;
    /// Multiplies row `i` by `weights[i]`.
    fn scale_rows(&mut self, x: &Self::T, weights: &[S]) -> Self::T;
    fn mean_rows(&mut self, x: &Self::T) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gain: ParamId, shift: ParamId, eps: f64) -> Self::T;
    fn gelu(&mut self, x: &Self::T) -> Self::T;
    fn silu(&mut self, x: &Self::T) -> Self::T;
    fn attention(
        &mut self,
        q: &Self::T,
        k: &Self::T,
        v: &Self::T,
        layout: &Arc<AttentionLayout>,
    ) -> (Self::T, AttentionProbs<S>);
    fn conv2d(&mut self, x: &Self::T, w: ParamId, b: Option<ParamId>, geom: ConvGeometry) -> Self::T;
    fn channel_norm(&mut self, x: &Self::T, ids: ChannelNormIds) -> Self::T;
    /// Inverted dropout; the identity unless the executor is training.
    fn dropout(&mut self, x: &Self::T, rate: f64) -> Self::T;
    /// Softmax cross-entropy of a `1 x classes` logit row, as `1 x 1`.
    fn cross_entropy(&mut self, logits: &Self::T, label: usize) -> Self::T;
}
