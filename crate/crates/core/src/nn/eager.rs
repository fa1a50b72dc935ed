use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};

use super::exec::{AttentionLayout, AttentionProbs, ChannelNormIds, ConvGeometry, Exec, CHANNEL_NORM_EPS};
use super::{kernels, ParamId, ParamStore, Scalar};

/// Direct evaluation without recording; intermediate values are freed as soon
/// as the forward pass drops them. Dropout is always off.
pub struct Eager<'p, S> {
    store: &'p ParamStore<S>,
}

impl<'p, S: Scalar> Eager<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Eager { store }
    }
}

impl<S: Scalar> Exec<S> for Eager<'_, S> {
    type T = Array2<S>;

    fn store(&self) -> &ParamStore<S> {
        self.store
    }

    fn training(&self) -> bool {
        false
    }

    fn value<'a>(&'a self, t: &'a Array2<S>) -> &'a Array2<S> {
        t
    }

    fn constant(&mut self, x: Array2<S>) -> Array2<S> {
        x
    }

    fn param(&mut self, id: ParamId) -> Array2<S> {
        self.store.get(id).clone()
    }

    fn linear(&mut self, x: &Array2<S>, w: ParamId, b: Option<ParamId>) -> Array2<S> {
        kernels::linear(x, self.store.get(w), b.map(|b| self.store.get(b)))
    }

    fn add(&mut self, a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
        a + b
    }

    fn gather_rows(&mut self, x: &Array2<S>, rows: &[usize]) -> Array2<S> {
        kernels::gather_rows(x, rows)
    }

    fn concat_rows(&mut self, parts: &[&Array2<S>]) -> Array2<S> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("matching widths")
    }

    fn scale_rows(&mut self, x: &Array2<S>, weights: &[S]) -> Array2<S> {
        let mut y = x.clone();
        for (mut row, &w) in y.rows_mut().into_iter().zip(weights) {
            row.mapv_inplace(|v| v * w);
        }
        y
    }

    fn mean_rows(&mut self, x: &Array2<S>) -> Array2<S> {
        x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
    }

    fn layer_norm(&mut self, x: &Array2<S>, gain: ParamId, shift: ParamId, eps: f64) -> Array2<S> {
        kernels::layer_norm(x, self.store.get(gain), self.store.get(shift), eps).0
    }

    fn gelu(&mut self, x: &Array2<S>) -> Array2<S> {
        x.mapv(kernels::gelu)
    }

    fn silu(&mut self, x: &Array2<S>) -> Array2<S> {
        x.mapv(kernels::silu)
    }

    fn attention(
        &mut self,
        q: &Array2<S>,
        k: &Array2<S>,
        v: &Array2<S>,
        layout: &Arc<AttentionLayout>,
    ) -> (Array2<S>, AttentionProbs<S>) {
        kernels::attention(q, k, v, layout)
    }

    fn conv2d(&mut self, x: &Array2<S>, w: ParamId, b: Option<ParamId>, geom: ConvGeometry) -> Array2<S> {
        let cols = kernels::im2col(x.view(), &geom);
        kernels::linear(&cols, self.store.get(w), b.map(|b| self.store.get(b)))
    }

    fn channel_norm(&mut self, x: &Array2<S>, ids: ChannelNormIds) -> Array2<S> {
        let scale = kernels::channel_scale(
            self.store.get(ids.gain),
            self.store.get(ids.running_var),
            CHANNEL_NORM_EPS,
        );
        kernels::channel_norm(x, &scale, self.store.get(ids.shift), self.store.get(ids.running_mean))
    }

    fn dropout(&mut self, x: &Array2<S>, _rate: f64) -> Array2<S> {
        x.clone()
    }

    fn cross_entropy(&mut self, logits: &Array2<S>, label: usize) -> Array2<S> {
        let (loss, _) = kernels::cross_entropy(logits, label);
        Array2::from_elem((1, 1), loss)
    }
}
