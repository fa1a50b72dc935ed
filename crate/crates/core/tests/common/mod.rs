//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ageformer::datamodel::{AgeClass, NUM_CLASSES};
use ageformer::evaluation::MetricsReport;
use ageformer::model::{AgeFormerNet, ModelConfig, ModelInput};
use ageformer::nn::{Eager, Exec, Graph, ParamId, ParamKind, ParamStore};
use ageformer::preprocessing::{FaceInput, VideoClip};
use ageformer::video_backbone::LAYER_NORM_EPS;
use ndarray::{Array2, Array3, Array4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor of the relative error, so gradients that are zero or
/// round-off sized compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn random_clip(frames: usize, h: usize, w: usize, rng: &mut impl Rng) -> VideoClip {
    let data = Array4::from_shape_simple_fn((frames, h, w, 3), || rng.gen::<f32>());
    VideoClip::new(data, (0..frames).collect())
}

pub fn random_face(size: usize, rng: &mut impl Rng) -> FaceInput {
    FaceInput::present(Array3::from_shape_simple_fn((size, size, 3), || rng.gen::<f32>() * 2.0 - 1.0))
}

/// Gives every bias, shift and gain a random value so no gradient path is
/// hidden behind an initial zero or one.
pub fn randomize_affine(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        match store.kind(id) {
            ParamKind::Bias => store.get_mut(id).mapv_inplace(|_| rng.gen_range(-0.1..0.1)),
            ParamKind::Gain => store.get_mut(id).mapv_inplace(|_| rng.gen_range(0.8..1.2)),
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub tensors: usize,
    pub checked: usize,
    pub min_per_tensor: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    pub seconds: f64,
}

/// Where a parameter sits, to re-run only the part of the forward pass it
/// influences.
enum Stage {
    VideoInput,
    /// Block and sublayer (0 temporal, 1 spatial, 2 MLP).
    VideoBlock(usize, usize),
    VideoNorm,
    Face,
    Fusion,
}

fn stage_of(name: &str) -> Stage {
    if let Some(rest) = name.strip_prefix("video.blocks.") {
        let mut parts = rest.split('.');
        let l = parts.next().unwrap().parse().unwrap();
        let sub = match parts.next().unwrap() {
            "temporal" => 0,
            "spatial" => 1,
            "mlp" => 2,
            other => panic!("unexpected sublayer {other}"),
        };
        Stage::VideoBlock(l, sub)
    } else if name.starts_with("video.norm.") {
        Stage::VideoNorm
    } else if name.starts_with("video.") {
        Stage::VideoInput
    } else if name.starts_with("face.") {
        Stage::Face
    } else {
        assert!(name.starts_with("fusion."), "unexpected parameter {name}");
        Stage::Fusion
    }
}

struct Staged<'a> {
    net: &'a AgeFormerNet,
    input: &'a ModelInput<f64>,
    label: AgeClass,
    /// Token matrices entering each sublayer, `3 l + sub`, plus the final
    /// block output.
    tokens: Vec<Array2<f64>>,
    main: Array2<f64>,
    support: Array2<f64>,
}

impl<'a> Staged<'a> {
    fn new(net: &'a AgeFormerNet, store: &ParamStore<f64>, input: &'a ModelInput<f64>, label: AgeClass) -> Self {
        let mut e = Eager::new(store);
        let mut tokens = vec![net.video.embed(&mut e, &input.patches)];
        for l in 0..net.video.blocks.len() {
            for sub in 0..3 {
                let next = sublayer(net, &mut e, tokens.last().unwrap(), l, sub);
                tokens.push(next);
            }
        }
        let mut s = Staged {
            net,
            input,
            label,
            tokens,
            main: Array2::zeros((0, 0)),
            support: Array2::zeros((0, 0)),
        };
        s.main = s.main_from(store, 3 * s.net.video.blocks.len(), s.tokens.last().unwrap());
        s.support = net.support_feature(&mut e, &input.face);
        s
    }

    /// Class-token feature, running the sublayers from index `first` on.
    fn main_from(&self, store: &ParamStore<f64>, first: usize, x: &Array2<f64>) -> Array2<f64> {
        let v = &self.net.video;
        let mut e = Eager::new(store);
        let mut x = x.clone();
        for k in first..3 * v.blocks.len() {
            x = sublayer(self.net, &mut e, &x, k / 3, k % 3);
        }
        // Layer norm acts per row, so normalizing the class row alone is exact.
        let cls = e.gather_rows(&x, &[0]);
        e.layer_norm(&cls, v.norm.gain, v.norm.shift, LAYER_NORM_EPS)
    }

    fn head_loss(&self, store: &ParamStore<f64>, main: &Array2<f64>, support: &Array2<f64>) -> f64 {
        let mut e = Eager::new(store);
        let fused = self.net.fusion.fuse(&mut e, main, support).unwrap();
        let ce = e.cross_entropy(&fused.logits, self.label.index());
        ce[[0, 0]]
    }

    /// Loss after a change to a parameter in `stage`.
    fn loss(&self, store: &ParamStore<f64>, stage: &Stage) -> f64 {
        match stage {
            Stage::Fusion => self.head_loss(store, &self.main, &self.support),
            Stage::Face => {
                let mut e = Eager::new(store);
                let support = self.net.support_feature(&mut e, &self.input.face);
                self.head_loss(store, &self.main, &support)
            }
            Stage::VideoNorm => {
                let main = self.main_from(store, 3 * self.net.video.blocks.len(), self.tokens.last().unwrap());
                self.head_loss(store, &main, &self.support)
            }
            Stage::VideoBlock(l, sub) => {
                let k = 3 * l + sub;
                let main = self.main_from(store, k, &self.tokens[k]);
                self.head_loss(store, &main, &self.support)
            }
            Stage::VideoInput => {
                let mut e = Eager::new(store);
                let x0 = self.net.video.embed(&mut e, &self.input.patches);
                let main = self.main_from(store, 0, &x0);
                self.head_loss(store, &main, &self.support)
            }
        }
    }
}

fn sublayer(net: &AgeFormerNet, e: &mut Eager<'_, f64>, x: &Array2<f64>, l: usize, sub: usize) -> Array2<f64> {
    match sub {
        0 => net.video.temporal_sublayer(e, x, l).0,
        1 => net.video.spatial_sublayer(e, x, l).0,
        _ => net.video.mlp_sublayer(e, x, l),
    }
}

/// Central-difference check of the full model's cross-entropy gradient in
/// f64: `per_tensor` randomly chosen scalars of every trainable tensor (all
/// of them when the tensor is smaller).
pub fn full_model_gradient_check(cfg: &ModelConfig, seed: u64, per_tensor: usize, step: f64) -> FdReport {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = AgeFormerNet::register(cfg, &mut store, seed).unwrap();
    randomize_affine(&mut store, &mut rng);
    let v = &cfg.video;
    let clip = random_clip(v.frames, v.height, v.width, &mut rng);
    let face = random_face(cfg.face.input_size, &mut rng);
    let input = net.input::<f64>(&clip, &face).unwrap();
    let label = AgeClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap();

    let mut g = Graph::new(&store, false, 0);
    let loss = net.loss(&mut g, &input, label).unwrap();
    let grads = g.backward(loss);
    drop(g);

    let staged = Staged::new(&net, &store, &input, label);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut report = FdReport {
        tensors: ids.len(),
        checked: 0,
        min_per_tensor: usize::MAX,
        worst: 0.0,
        worst_at: String::new(),
        worst_pair: (0.0, 0.0),
        seconds: 0.0,
    };
    for id in ids {
        let name = store.name(id).to_string();
        let stage = stage_of(&name);
        let len = store.get(id).len();
        let picks = sample(&mut rng, len, per_tensor.min(len)).into_vec();
        report.min_per_tensor = report.min_per_tensor.min(picks.len());
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).raw_dim()));
        for idx in picks {
            let orig = store.get(id).as_slice().unwrap()[idx];
            store.get_mut(id).as_slice_mut().unwrap()[idx] = orig + step;
            let up = staged.loss(&store, &stage);
            store.get_mut(id).as_slice_mut().unwrap()[idx] = orig - step;
            let down = staged.loss(&store, &stage);
            store.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[idx];
            let err = rel_error(an, numeric);
            if err > report.worst {
                report.worst = err;
                report.worst_pair = (an, numeric);
                report.worst_at = format!("{name}[{idx}]");
            }
            report.checked += 1;
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    report
}

/// Naive metrics: every count by a separate scan over the pairs.
pub fn naive_metrics(preds: &[AgeClass], labels: &[AgeClass]) -> MetricsReport {
    let n = preds.len();
    let count = |f: &dyn Fn(AgeClass, AgeClass) -> bool| preds.iter().zip(labels).filter(|(&p, &l)| f(p, l)).count();
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (t, row) in confusion.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            *cell = count(&|pp, ll| ll.index() == t && pp.index() == p);
        }
    }
    let correct = count(&|p, l| p == l);
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = std::array::from_fn(|c| {
        let tp = count(&|p, l| p.index() == c && l.index() == c);
        let pred_c = count(&|p, _| p.index() == c);
        let true_c = count(&|_, l| l.index() == c);
        let precision = div(tp, pred_c);
        let recall = div(tp, true_c);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ageformer::evaluation::ClassScores {
            precision,
            recall,
            f1,
            support: true_c,
        }
    });
    let per_class: [ageformer::evaluation::ClassScores; NUM_CLASSES] = per_class;
    let mean = |f: &dyn Fn(&ageformer::evaluation::ClassScores) -> f64| {
        (f(&per_class[0]) + f(&per_class[1]) + f(&per_class[2]) + f(&per_class[3])) / 4.0
    };
    MetricsReport {
        total: n,
        accuracy: div(correct, n),
        macro_precision: mean(&|s| s.precision),
        macro_recall: mean(&|s| s.recall),
        macro_f1: mean(&|s| s.f1),
        per_class,
        confusion,
    }
}

pub fn random_classes(n: usize, rng: &mut impl Rng) -> Vec<AgeClass> {
    (0..n).map(|_| AgeClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap()).collect()
}
