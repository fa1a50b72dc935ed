//! Per-op gradient checks against central differences in f64.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
}

/// Compares `d sum(out * probe) / d param` from the tape with central
/// differences, for every scalar of every trainable tensor.
macro_rules! check_grads {
    ($store:expr, $probe:expr, |$e:ident| $body:expr) => {{
        let store: &ParamStore<f64> = &$store;
        let probe: &Array2<f64> = &$probe;
        let mut graph = Graph::new(store, false, 0);
        let out = {
            let $e = &mut graph;
            $body
        };
        let grads = graph.backward_from(out, probe.clone()).params;
        let eval = |s: &ParamStore<f64>| -> f64 {
            let mut eager = Eager::new(s);
            let y = {
                let $e = &mut eager;
                $body
            };
            (&y * probe).sum()
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for id in store.ids().filter(|&id| store.is_trainable(id)) {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).raw_dim()));
            for idx in 0..store.get(id).len() {
                let mut plus = store.clone();
                let mut minus = store.clone();
                {
                    let v = plus.get_mut(id).as_slice_mut().unwrap();
                    v[idx] += h;
                }
                {
                    let v = minus.get_mut(id).as_slice_mut().unwrap();
                    v[idx] -= h;
                }
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / (1.0f64).max(fd.abs().max(an.abs()));
                worst = worst.max(err);
                assert!(err < 1e-6, "{} [{idx}]: analytic {an} vs fd {fd}", store.name(id));
            }
        }
        worst
    }};
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize, ParamKind)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for &(name, r, c, kind) in shapes {
        s.add(name, rand_mat(r, c, rng), kind);
    }
    s
}

#[test]
fn linear_add_gelu_silu_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = store_with(
        &mut rng,
        &[
            ("x", 5, 4, ParamKind::Embedding),
            ("w", 4, 3, ParamKind::Weight),
            ("b", 1, 3, ParamKind::Bias),
            ("w2", 3, 3, ParamKind::Weight),
        ],
    );
    let (x, w, b, w2) = (s.id("x").unwrap(), s.id("w").unwrap(), s.id("b").unwrap(), s.id("w2").unwrap());
    let probe = rand_mat(6, 3, &mut rng);
    check_grads!(s, probe, |e| {
        let xv = e.param(x);
        let y = e.linear(&xv, w, Some(b));
        let g = e.gelu(&y);
        let z = e.linear(&g, w2, None);
        let si = e.silu(&z);
        let sum = e.add(&si, &y);
        let m = e.mean_rows(&sum);
        let sc = e.scale_rows(&sum, &[0.5, -1.0, 2.0, 0.0, 1.5]);
        let picked = e.gather_rows(&sc, &[4, 0, 0, 2, 1]);
        e.concat_rows(&[&picked, &m])
    });
}

#[test]
fn layer_norm_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = store_with(
        &mut rng,
        &[
            ("x", 3, 6, ParamKind::Embedding),
            ("g", 1, 6, ParamKind::Gain),
            ("sh", 1, 6, ParamKind::Bias),
            ("w", 6, 4, ParamKind::Weight),
        ],
    );
    let (x, g, sh, w) = (s.id("x").unwrap(), s.id("g").unwrap(), s.id("sh").unwrap(), s.id("w").unwrap());
    let probe = Array2::from_elem((1, 1), 1.0);
    check_grads!(s, probe, |e| {
        let xv = e.param(x);
        let n = e.layer_norm(&xv, g, sh, 1e-5);
        let m = e.mean_rows(&n);
        let logits = e.linear(&m, w, None);
        e.cross_entropy(&logits, 2)
    });
}

#[test]
fn grouped_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = store_with(
        &mut rng,
        &[
            ("q", 5, 4, ParamKind::Embedding),
            ("k", 5, 4, ParamKind::Embedding),
            ("v", 5, 4, ParamKind::Embedding),
        ],
    );
    let layout = Arc::new(AttentionLayout {
        groups: vec![
            AttentionGroup {
                queries: vec![1, 2],
                keys: vec![0, 1, 2],
            },
            AttentionGroup {
                queries: vec![0, 3, 4],
                keys: vec![0, 3, 4],
            },
            AttentionGroup {
                queries: vec![0],
                keys: vec![1, 4],
            },
        ],
        row_weight: vec![0.5, 1.0, 1.0, 1.0, 1.0],
        heads: 2,
    });
    let probe = rand_mat(5, 4, &mut rng);
    let (q, k, v) = (s.id("q").unwrap(), s.id("k").unwrap(), s.id("v").unwrap());
    check_grads!(s, probe, |e| {
        let (qv, kv, vv) = (e.param(q), e.param(k), e.param(v));
        e.attention(&qv, &kv, &vv, &layout).0
    });
}

#[test]
fn conv_and_channel_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let geom = ConvGeometry {
        in_h: 5,
        in_w: 4,
        in_c: 2,
        out_c: 3,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let mut s = store_with(
        &mut rng,
        &[
            ("x", 20, 2, ParamKind::Embedding),
            ("w", 18, 3, ParamKind::Weight),
            ("b", 1, 3, ParamKind::Bias),
            ("g", 1, 3, ParamKind::Gain),
            ("sh", 1, 3, ParamKind::Bias),
            ("rm", 1, 3, ParamKind::Buffer),
        ],
    );
    s.add("rv", Array2::from_elem((1, 3), 0.7), ParamKind::Buffer);
    let ids = ChannelNormIds {
        gain: s.id("g").unwrap(),
        shift: s.id("sh").unwrap(),
        running_mean: s.id("rm").unwrap(),
        running_var: s.id("rv").unwrap(),
    };
    let (x, w, b) = (s.id("x").unwrap(), s.id("w").unwrap(), s.id("b").unwrap());
    let probe = rand_mat(geom.out_h() * geom.out_w(), 3, &mut rng);
    check_grads!(s, probe, |e| {
        let xv = e.param(x);
        let y = e.conv2d(&xv, w, Some(b), geom);
        let n = e.channel_norm(&y, ids);
        e.silu(&n)
    });
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_mat(4, 6, &mut rng) * 5.0;
    let k = rand_mat(4, 6, &mut rng) * 5.0;
    let v = rand_mat(4, 6, &mut rng);
    let layout = AttentionLayout {
        groups: vec![AttentionGroup {
            queries: vec![0, 1, 2, 3],
            keys: vec![0, 1, 2, 3],
        }],
        row_weight: vec![1.0; 4],
        heads: 3,
    };
    let (_, probs) = kernels::attention(&q, &k, &v, &layout);
    assert_eq!(probs.len(), 3);
    for p in probs {
        for row in p.rows() {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_is_inverted_and_seeded() {
    let s: ParamStore<f64> = ParamStore::new();
    let x = Array2::<f64>::ones((50, 40));
    let mut g1 = Graph::new(&s, true, 7);
    let a = g1.constant(x.clone());
    let d1 = g1.dropout(&a, 0.1);
    let mut g2 = Graph::new(&s, true, 7);
    let b = g2.constant(x.clone());
    let d2 = g2.dropout(&b, 0.1);
    assert_eq!(g1.value(&d1), g2.value(&d2));
    let kept = g1.value(&d1).iter().filter(|&&v| v != 0.0).count() as f64 / 2000.0;
    assert!((kept - 0.9).abs() < 0.05);
    assert!(g1.value(&d1).iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    let mut eval = Graph::new(&s, false, 7);
    let c = eval.constant(x.clone());
    let d3 = eval.dropout(&c, 0.1);
    assert_eq!(eval.value(&d3), &x);
}

#[test]
fn buffers_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = store_with(&mut rng, &[("buf", 2, 2, ParamKind::Buffer), ("w", 2, 2, ParamKind::Weight)]);
    let mut g = Graph::new(&s, false, 0);
    let p = g.param(s.id("buf").unwrap());
    let y = g.linear(&p, s.id("w").unwrap(), None);
    let grads = g.backward_from(y, Array2::ones((2, 2))).params;
    assert!(grads.get(s.id("buf").unwrap()).is_none());
    assert!(grads.get(s.id("w").unwrap()).is_some());
}
