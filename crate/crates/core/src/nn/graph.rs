use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exec::{AttentionLayout, AttentionProbs, ChannelNormIds, ConvGeometry, Exec, CHANNEL_NORM_EPS};
use super::kernels::{self, LayerNormCache};
use super::{Grads, ParamId, ParamStore, Scalar};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Constant,
    Param(ParamId),
    Linear {
        x: usize,
        w: ParamId,
        b: Option<ParamId>,
    },
    Add(usize, usize),
    Gather {
        x: usize,
        rows: Vec<usize>,
    },
    Concat(Vec<usize>),
    ScaleRows {
        x: usize,
        weights: Vec<S>,
    },
    MeanRows(usize),
    LayerNorm {
        x: usize,
        gain: ParamId,
        shift: ParamId,
        cache: LayerNormCache<S>,
    },
    Gelu(usize),
    Silu(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: Arc<AttentionLayout>,
        probs: AttentionProbs<S>,
    },
    Conv {
        w: ParamId,
        b: Option<ParamId>,
        x: usize,
        geom: ConvGeometry,
        cols: Array2<S>,
    },
    ChannelNorm {
        x: usize,
        ids: ChannelNormIds,
        scale: Array2<S>,
    },
    Dropout {
        x: usize,
        mask: Array2<S>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Array2<S>,
    op: Op<S>,
    /// Whether any parameter lies upstream; constants and values built only
    /// from constants get no gradient.
    requires: bool,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Graph<'p, S> {
    store: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Result of a backward pass: parameter gradients plus the gradient of every
/// recorded value.
pub struct Backward<S> {
    pub params: Grads<S>,
    nodes: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Backward<S> {
    pub fn of(&self, v: Var) -> Option<&Array2<S>> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// `training` enables dropout, drawn from `seed`.
    pub fn new(store: &'p ParamStore<S>, training: bool, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>) -> Var {
        let req = |i: &usize| self.nodes[*i].requires;
        let requires = match &op {
            Op::Constant => false,
            Op::Param(_) | Op::Linear { .. } | Op::LayerNorm { .. } | Op::Conv { .. } | Op::ChannelNorm { .. } => true,
            Op::Add(a, b) => req(a) || req(b),
            Op::Concat(parts) => parts.iter().any(req),
            Op::Attention { q, k, v, .. } => req(q) || req(k) || req(v),
            Op::Gather { x, .. }
            | Op::ScaleRows { x, .. }
            | Op::MeanRows(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Dropout { x, .. } => req(x),
            Op::CrossEntropy { logits, .. } => req(logits),
        };
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: usize) -> &Array2<S> {
        &self.nodes[v].value
    }

    /// Gradients of a scalar (`1 x 1`) output.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        let shape = self.nodes[loss.0].value.dim();
        assert_eq!(shape, (1, 1), "backward needs a scalar output");
        self.backward_from(loss, Array2::ones((1, 1))).params
    }

    /// Vector-Jacobian product of `out` with `seed`.
    pub fn backward_from(&self, out: Var, seed: Array2<S>) -> Backward<S> {
        assert_eq!(seed.dim(), self.nodes[out.0].value.dim(), "seed shape");
        let mut grads: Vec<Option<Array2<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Grads::zeros_like(self.store);
        grads[out.0] = Some(seed);

        let needed: Vec<bool> = self.nodes.iter().map(|n| n.requires).collect();
        let acc = |grads: &mut [Option<Array2<S>>], i: usize, g: Array2<S>| {
            if !needed[i] {
                return;
            }
            match &mut grads[i] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let store = self.store;
            let mut param_acc = |id: ParamId, g: &Array2<S>| {
                if store.is_trainable(id) {
                    params.accumulate(id, g);
                }
            };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => param_acc(*id, &dy),
                Op::Linear { x, w, b } => {
                    let xv = self.val(*x);
                    param_acc(*w, &kernels::matmul(xv.t(), dy.view()));
                    if let Some(b) = b {
                        param_acc(*b, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needed[*x] {
                        acc(&mut grads, *x, kernels::matmul(dy.view(), store.get(*w).t()));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy.clone());
                }
                Op::Gather { x, rows } => {
                    let n = self.val(*x).nrows();
                    acc(&mut grads, *x, kernels::scatter_rows(&dy, rows, n));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.val(p).nrows();
                        acc(&mut grads, p, dy.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ScaleRows { x, weights } => {
                    let mut g = dy.clone();
                    for (mut row, &w) in g.rows_mut().into_iter().zip(weights) {
                        row.mapv_inplace(|v| v * w);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MeanRows(x) => {
                    let n = self.val(*x).nrows();
                    let inv = S::lit(1.0 / n as f64);
                    let row = dy.row(0).mapv(|v| v * inv);
                    let g = row.broadcast((n, row.len())).expect("row broadcast").to_owned();
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm { x, gain, shift, cache } => {
                    let (dx, dgain, dshift) = kernels::layer_norm_backward(&dy, store.get(*gain), cache);
                    param_acc(*gain, &dgain);
                    param_acc(*shift, &dshift);
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let g = &dy * &self.val(*x).mapv(kernels::gelu_grad);
                    acc(&mut grads, *x, g);
                }
                Op::Silu(x) => {
                    let g = &dy * &self.val(*x).mapv(kernels::silu_grad);
                    acc(&mut grads, *x, g);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) =
                        kernels::attention_backward(&dy, self.val(*q), self.val(*k), self.val(*v), layout, probs);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Conv { w, b, x, geom, cols } => {
                    param_acc(*w, &kernels::matmul(cols.t(), dy.view()));
                    if let Some(b) = b {
                        param_acc(*b, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needed[*x] {
                        let dcols = kernels::matmul(dy.view(), store.get(*w).t());
                        acc(&mut grads, *x, kernels::col2im(&dcols, geom));
                    }
                }
                Op::ChannelNorm { x, ids, scale } => {
                    let centered = self.val(*x) - store.get(ids.running_mean);
                    let inv = kernels::channel_scale(
                        &Array2::ones(scale.raw_dim()),
                        store.get(ids.running_var),
                        CHANNEL_NORM_EPS,
                    );
                    let dgain = (&dy * &(&centered * &inv)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    param_acc(ids.gain, &dgain);
                    param_acc(ids.shift, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, &dy * scale);
                }
                Op::Dropout { x, mask } => acc(&mut grads, *x, &dy * mask),
                Op::CrossEntropy { logits, label, probs } => {
                    let upstream = dy[[0, 0]];
                    let mut g = Array2::from_shape_vec((1, probs.len()), probs.clone()).expect("row");
                    g[[0, *label]] -= S::one();
                    g.mapv_inplace(|v| v * upstream);
                    acc(&mut grads, *logits, g);
                }
            }
            grads[i] = Some(dy);
        }
        Backward { params, nodes: grads }
    }
}

impl<S: Scalar> Exec<S> for Graph<'_, S> {
    type T = Var;

    fn store(&self) -> &ParamStore<S> {
        self.store
    }

    fn training(&self) -> bool {
        self.training
    }

    fn value<'a>(&'a self, t: &'a Var) -> &'a Array2<S> {
        &self.nodes[t.0].value
    }

    fn constant(&mut self, x: Array2<S>) -> Var {
        self.push(x, Op::Constant)
    }

    fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        self.push(value, Op::Param(id))
    }

    fn linear(&mut self, x: &Var, w: ParamId, b: Option<ParamId>) -> Var {
        let value = kernels::linear(self.val(x.0), self.store.get(w), b.map(|b| self.store.get(b)));
        self.push(value, Op::Linear { x: x.0, w, b })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let value = self.val(a.0) + self.val(b.0);
        self.push(value, Op::Add(a.0, b.0))
    }

    fn gather_rows(&mut self, x: &Var, rows: &[usize]) -> Var {
        let value = kernels::gather_rows(self.val(x.0), rows);
        self.push(
            value,
            Op::Gather {
                x: x.0,
                rows: rows.to_vec(),
            },
        )
    }

    fn concat_rows(&mut self, parts: &[&Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.val(p.0).view()).collect();
        let value = concatenate(Axis(0), &views).expect("matching widths");
        self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    fn scale_rows(&mut self, x: &Var, weights: &[S]) -> Var {
        let mut value = self.val(x.0).clone();
        for (mut row, &w) in value.rows_mut().into_iter().zip(weights) {
            row.mapv_inplace(|v| v * w);
        }
        self.push(
            value,
            Op::ScaleRows {
                x: x.0,
                weights: weights.to_vec(),
            },
        )
    }

    fn mean_rows(&mut self, x: &Var) -> Var {
        let value = self.val(x.0).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(value, Op::MeanRows(x.0))
    }

    fn layer_norm(&mut self, x: &Var, gain: ParamId, shift: ParamId, eps: f64) -> Var {
        let (value, cache) = kernels::layer_norm(self.val(x.0), self.store.get(gain), self.store.get(shift), eps);
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain,
                shift,
                cache,
            },
        )
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let value = self.val(x.0).mapv(kernels::gelu);
        self.push(value, Op::Gelu(x.0))
    }

    fn silu(&mut self, x: &Var) -> Var {
        let value = self.val(x.0).mapv(kernels::silu);
        self.push(value, Op::Silu(x.0))
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, layout: &Arc<AttentionLayout>) -> (Var, AttentionProbs<S>) {
        let (value, probs) = kernels::attention(self.val(q.0), self.val(k.0), self.val(v.0), layout);
        let out = self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                layout: Arc::clone(layout),
                probs: probs.clone(),
            },
        );
        (out, probs)
    }

    fn conv2d(&mut self, x: &Var, w: ParamId, b: Option<ParamId>, geom: ConvGeometry) -> Var {
        let cols = kernels::im2col(self.val(x.0).view(), &geom);
        let value = kernels::linear(&cols, self.store.get(w), b.map(|b| self.store.get(b)));
        self.push(value, Op::Conv { w, b, x: x.0, geom, cols })
    }

    fn channel_norm(&mut self, x: &Var, ids: ChannelNormIds) -> Var {
        let scale = kernels::channel_scale(self.store.get(ids.gain), self.store.get(ids.running_var), CHANNEL_NORM_EPS);
        let value = kernels::channel_norm(
            self.val(x.0),
            &scale,
            self.store.get(ids.shift),
            self.store.get(ids.running_mean),
        );
        self.push(value, Op::ChannelNorm { x: x.0, ids, scale })
    }

    fn dropout(&mut self, x: &Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return *x;
        }
        let keep = 1.0 - rate;
        let inv = S::lit(1.0 / keep);
        let shape = self.val(x.0).raw_dim();
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { inv } else { S::zero() });
        let value = self.val(x.0) * &mask;
        self.push(value, Op::Dropout { x: x.0, mask })
    }

    fn cross_entropy(&mut self, logits: &Var, label: usize) -> Var {
        let (loss, probs) = kernels::cross_entropy(self.val(logits.0), label);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits: logits.0,
                label,
                probs,
            },
        )
    }
}
