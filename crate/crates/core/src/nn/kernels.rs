//! Forward and backward numerics shared by the executors.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::exec::{AttentionLayout, AttentionProbs, ConvGeometry};
use super::Scalar;

/// `a b` for views of any stride.
pub fn matmul<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    assert_eq!(a.ncols(), b.nrows(), "matmul: {:?} times {:?}", a.dim(), b.dim());
    a.dot(&b)
}

pub fn linear<S: Scalar>(x: &Array2<S>, w: &Array2<S>, b: Option<&Array2<S>>) -> Array2<S> {
    let mut y = matmul(x.view(), w.view());
    if let Some(b) = b {
        y += b;
    }
    y
}

pub fn gather_rows<S: Scalar>(x: &Array2<S>, rows: &[usize]) -> Array2<S> {
    x.select(Axis(0), rows)
}

pub fn scatter_rows<S: Scalar>(grad: &Array2<S>, rows: &[usize], n_rows: usize) -> Array2<S> {
    let mut out = Array2::zeros((n_rows, grad.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        let mut dst = out.row_mut(r);
        dst += &grad.row(i);
    }
    out
}

pub struct LayerNormCache<S> {
    pub normalized: Array2<S>,
    pub inv_std: Vec<S>,
}

pub fn layer_norm<S: Scalar>(
    x: &Array2<S>,
    gain: &Array2<S>,
    shift: &Array2<S>,
    eps: f64,
) -> (Array2<S>, LayerNormCache<S>) {
    let d = S::lit(x.ncols() as f64);
    let eps = S::lit(eps);
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normalized.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<S>() / d;
        let inv = S::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std.push(inv);
    }
    let mut y = &normalized * gain;
    y += shift;
    (y, LayerNormCache { normalized, inv_std })
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    gain: &Array2<S>,
    cache: &LayerNormCache<S>,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let d = S::lit(dy.ncols() as f64);
    let dgain = (dy * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dshift = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(i);
        let xh = cache.normalized.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>() / d;
        let inv = cache.inv_std[i];
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gv, &xv| {
            *o = inv * (gv - mean_g - xv * mean_gx);
        });
    }
    (dx, dgain, dshift)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
/// Tanh-form GELU, evaluated as `x * sigmoid(2u)` with
/// `u = c (x + a x^3)`; `0.5 (1 + tanh u) = sigmoid(2u)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    x / (S::one() + (-(u + u)).exp())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let s = S::one() / (S::one() + (-(u + u)).exp());
    s + x * S::lit(2.0) * s * (S::one() - s) * c * (S::one() + S::lit(3.0) * a * x * x)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    out
}

fn head_dim(width: usize, heads: usize) -> usize {
    assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
    width / heads
}

/// Dot product with independent partial sums, so it vectorizes.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().copied().sum::<S>() + tail
}

/// `dst += w * src`
fn axpy<S: Scalar>(dst: &mut [S], w: S, src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

fn rows_of<S: Scalar>(x: &Array2<S>) -> std::borrow::Cow<'_, [S]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

pub fn attention<S: Scalar>(
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
    layout: &AttentionLayout,
) -> (Array2<S>, AttentionProbs<S>) {
    let width = q.ncols();
    let dh = head_dim(width, layout.heads);
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let (qs, ks, vs) = (rows_of(q), rows_of(k), rows_of(v));
    let mut out = Array2::zeros((layout.query_rows(), width));
    let os = out.as_slice_mut().expect("fresh matrix");
    let mut probs = Vec::with_capacity(layout.groups.len() * layout.heads);
    for group in &layout.groups {
        for h in 0..layout.heads {
            let off = h * dh;
            let mut p = Array2::zeros((group.queries.len(), group.keys.len()));
            for (i, &r) in group.queries.iter().enumerate() {
                let qr = &qs[r * width + off..r * width + off + dh];
                let row = p.row_mut(i).into_slice().expect("fresh matrix");
                for (pj, &c) in row.iter_mut().zip(&group.keys) {
                    *pj = dot(qr, &ks[c * width + off..c * width + off + dh]) * scale;
                }
                softmax_in_place(row);
                let w = S::lit(layout.row_weight[r]);
                let dst = &mut os[r * width + off..r * width + off + dh];
                for (&pj, &c) in row.iter().zip(&group.keys) {
                    axpy(dst, w * pj, &vs[c * width + off..c * width + off + dh]);
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<S: Scalar>(
    dout: &Array2<S>,
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
    layout: &AttentionLayout,
    probs: &AttentionProbs<S>,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let width = q.ncols();
    let dh = head_dim(width, layout.heads);
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let (qs, ks, vs, dos) = (rows_of(q), rows_of(k), rows_of(v), rows_of(dout));
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let dqs = dq.as_slice_mut().expect("fresh matrix");
    let dks = dk.as_slice_mut().expect("fresh matrix");
    let dvs = dv.as_slice_mut().expect("fresh matrix");
    let mut dog = vec![S::zero(); dh];
    let mut ds = Vec::new();
    for (g, group) in layout.groups.iter().enumerate() {
        for h in 0..layout.heads {
            let off = h * dh;
            let p = &probs[layout.slot(g, h)];
            for (i, &r) in group.queries.iter().enumerate() {
                let w = S::lit(layout.row_weight[r]);
                for (d, &x) in dog.iter_mut().zip(&dos[r * width + off..r * width + off + dh]) {
                    *d = w * x;
                }
                let prow = p.row(i);
                ds.clear();
                let mut weighted = S::zero();
                for (&pj, &c) in prow.iter().zip(&group.keys) {
                    let vc = c * width + off;
                    axpy(&mut dvs[vc..vc + dh], pj, &dog);
                    let dp = dot(&dog, &vs[vc..vc + dh]);
                    weighted += pj * dp;
                    ds.push(dp);
                }
                let qr = r * width + off;
                for ((&pj, &c), dsj) in prow.iter().zip(&group.keys).zip(ds.iter_mut()) {
                    *dsj = pj * (*dsj - weighted) * scale;
                    let kc = c * width + off;
                    axpy(&mut dqs[qr..qr + dh], *dsj, &ks[kc..kc + dh]);
                    axpy(&mut dks[kc..kc + dh], *dsj, &qs[qr..qr + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Unfolds a `(h*w) x c` feature map into `(out_h*out_w) x (k*k*c)` patches,
/// column order `(ky, kx, c)`, zero padded.
pub fn im2col<S: Scalar>(x: ArrayView2<S>, g: &ConvGeometry) -> Array2<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = Array2::zeros((oh * ow, g.patch_len()));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh matrix");
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * plen;
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let s0 = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let d0 = base + (ky * g.kernel + kx) * g.in_c;
                    dst[d0..d0 + g.in_c].copy_from_slice(&src[s0..s0 + g.in_c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<S: Scalar>(dcols: &Array2<S>, g: &ConvGeometry) -> Array2<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = Array2::zeros((g.in_h * g.in_w, g.in_c));
    let dcols = dcols.as_standard_layout();
    let src = dcols.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("fresh matrix");
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * plen;
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let d0 = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let s0 = base + (ky * g.kernel + kx) * g.in_c;
                    for c in 0..g.in_c {
                        dst[d0 + c] += src[s0 + c];
                    }
                }
            }
        }
    }
    dx
}

/// Per-column scale derived from frozen statistics.
pub fn channel_scale<S: Scalar>(gain: &Array2<S>, running_var: &Array2<S>, eps: f64) -> Array2<S> {
    let eps = S::lit(eps);
    Zip::from(gain).and(running_var).map_collect(|&g, &v| g / (v + eps).sqrt())
}

pub fn channel_norm<S: Scalar>(
    x: &Array2<S>,
    scale: &Array2<S>,
    shift: &Array2<S>,
    running_mean: &Array2<S>,
) -> Array2<S> {
    let mut y = x - running_mean;
    y *= scale;
    y += shift;
    y
}

/// Softmax cross-entropy of one logit row; returns `(loss, probs)`.
pub fn cross_entropy<S: Scalar>(logits: &Array2<S>, label: usize) -> (S, Vec<S>) {
    let mut probs: Vec<S> = logits.row(0).to_vec();
    let max = probs.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = probs.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
    let loss = lse - probs[label];
    softmax_in_place(&mut probs);
    (loss, probs)
}
