//! The joint training loop, the face-only benchmark, and the optimizer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::datamodel::AgeClass;
use crate::evaluation::{compute_metrics, evaluate};
use crate::face_backbone::{face_matrix, FaceBackbone, FaceBackboneConfig};
use crate::fusion_head::{logit_row, ClassDistribution};
use crate::model::{AgeFormer, Classifier, ModelInput, Prediction};
use crate::nn::{Eager, Exec, Grads, Graph, ParamId, ParamStore, Var};
use crate::preprocessing::{ClipDataset, FaceCrop, FaceInput, Normalization, Sample, SamplingMode};
use crate::seed::derive_seed;
use crate::video_backbone::{add_linear, LinearIds};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Exponential decay applied once per epoch.
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Parameters whose names start with any of these are not updated.
    pub frozen_prefixes: Vec<String>,
    /// Stops after this many optimizer steps, mid-epoch if necessary.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 16,
            lr: 3e-5,
            gamma: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            seed: 0,
            frozen_prefixes: Vec::new(),
            max_steps: None,
        }
    }
}

/// Settings of the face-only benchmark; the same loop with other defaults.
pub type FaceBenchConfig = TrainConfig;

impl TrainConfig {
    pub fn face_benchmark() -> FaceBenchConfig {
        TrainConfig {
            epochs: 200,
            batch_size: 512,
            lr: 2e-3,
            ..Default::default()
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("{prefix}lr: must be > 0, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            p.push(format!("{prefix}gamma: must lie in (0, 1], got {}", self.gamma));
        }
        if self.epochs == 0 {
            p.push(format!("{prefix}epochs: must be >= 1"));
        }
        if self.batch_size == 0 {
            p.push(format!("{prefix}batch_size: must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("{prefix}weight_decay: must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            p.push(format!("{prefix}beta1/beta2: must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            p.push(format!("{prefix}eps: must be > 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                p.push(format!("{prefix}clip_norm: must be > 0 when set"));
            }
        }
        if self.max_steps == Some(0) {
            p.push(format!("{prefix}max_steps: must be >= 1 when set"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("train.");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi(epoch as i32)
    }
}

/// Adam with decoupled weight decay, in the order: decay, moment update,
/// bias-corrected step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: Vec<Option<(Array2<f32>, Array2<f32>)>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// (frozen, buffers) are left alone, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Array2::zeros(p.dim()), Array2::zeros(p.dim())));
            if decay != 1.0 {
                p.mapv_inplace(|x| x * decay);
            }
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
            });
        }
    }
}

/// Scales `grads` so that their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm.is_finite() && norm > max_norm {
        grads.scale((max_norm / (norm + 1e-6)) as f32);
    }
    norm
}

/// One labelled training example.
#[derive(Clone, Debug)]
pub struct Labeled<X> {
    pub x: X,
    pub label: AgeClass,
}

/// A model the loop can train: its parameters and a per-example loss.
pub trait TrainModel {
    type Input;

    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;

    /// Records the cross-entropy of one example on `g`; returns the loss
    /// node and the logits.
    fn example_loss(&self, g: &mut Graph<'_, f32>, x: &Self::Input, label: AgeClass) -> Result<(Var, Vec<f64>)>;
}

impl TrainModel for AgeFormer {
    type Input = ModelInput<f32>;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn example_loss(&self, g: &mut Graph<'_, f32>, x: &ModelInput<f32>, label: AgeClass) -> Result<(Var, Vec<f64>)> {
        let out = self.net.forward(g, x)?;
        let logits = logit_row(g.value(&out.logits));
        Ok((g.cross_entropy(&out.logits, label.index()), logits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub correct: usize,
    pub count: usize,
}

/// Owns the optimizer state and performs mini-batch updates.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    frozen: Vec<ParamId>,
}

impl Trainer {
    pub fn new<M: TrainModel>(model: &M, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let store = model.params();
        let frozen = store
            .ids()
            .filter(|&id| cfg.frozen_prefixes.iter().any(|p| store.name(id).starts_with(p.as_str())))
            .collect();
        Ok(Trainer {
            cfg: cfg.clone(),
            opt: AdamW::from_config(cfg),
            frozen,
        })
    }

    /// Mean loss over `batch`, backward, clip, update. `(epoch, batch)`
    /// identify the step in diagnostics; `dropout_seed` seeds the masks.
    pub fn step<M: TrainModel>(
        &mut self,
        model: &mut M,
        batch: &[Labeled<M::Input>],
        lr: f64,
        at: (usize, usize),
        dropout_seed: u64,
    ) -> Result<StepStats> {
        assert!(!batch.is_empty(), "empty batch");
        let weight = 1.0 / batch.len() as f32;
        let mut grads = Grads::zeros_like(model.params());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (i, ex) in batch.iter().enumerate() {
            let mut g = Graph::new(model.params(), true, derive_seed(dropout_seed, &[i as u64]));
            let (loss, logits) = model.example_loss(&mut g, &ex.x, ex.label)?;
            let l = g.value(&loss)[[0, 0]] as f64;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: at.0,
                    batch: at.1,
                    lr,
                    grad_norm: grads.global_norm(),
                });
            }
            loss_sum += l;
            if Prediction::from_logits(&logits).class == ex.label {
                correct += 1;
            }
            grads.add_scaled(&g.backward(loss), weight);
        }
        for &id in &self.frozen {
            grads.clear(id);
        }
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grads.global_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: at.0,
                batch: at.1,
                lr,
                grad_norm,
            });
        }
        self.opt.step(model.params_mut(), &grads, lr);
        Ok(StepStats {
            loss: loss_sum / batch.len() as f64,
            grad_norm,
            correct,
            count: batch.len(),
        })
    }
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
    /// Optimizer steps taken so far, over all epochs.
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch and validation accuracy of the best checkpoint.
    pub best: Option<(usize, f64)>,
    pub steps: usize,
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub const LOG: &'static str = "train_log.jsonl";
    pub const BEST: &'static str = "best.ckpt";
    pub const LAST: &'static str = "last.ckpt";

    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunOutputs { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Generic epoch loop: shuffles, batches, steps, evaluates, checkpoints.
/// `load(i, seed)` prepares example `i`; `validate` scores the model;
/// `checkpoint` snapshots it.
fn run_epochs<M: TrainModel>(
    model: &mut M,
    n: usize,
    load: &dyn Fn(usize, u64) -> Result<Labeled<M::Input>>,
    validate: Option<&dyn Fn(&M) -> Result<f64>>,
    checkpoint: &dyn Fn(&M, serde_json::Value) -> Result<Checkpoint>,
    cfg: &TrainConfig,
    outputs: Option<&RunOutputs>,
) -> Result<TrainOutcome> {
    if n == 0 {
        return Err(Error::EmptyManifest);
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let mut log_file = match outputs {
        Some(o) => {
            let p = o.path(RunOutputs::LOG);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut steps = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0, epoch as u64])));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut stop = false;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| load(i, derive_seed(cfg.seed, &[1, epoch as u64, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let stats = trainer.step(model, &batch, lr, (epoch, b), derive_seed(cfg.seed, &[2, epoch as u64, b as u64]))?;
            loss_sum += stats.loss * stats.count as f64;
            correct += stats.correct;
            seen += stats.count;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        let val_acc = validate.map(|v| v(model)).transpose()?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
            steps,
        };
        info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} val acc {} lr {lr:.3e}",
            entry.train_loss,
            entry.train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.3}"))
        );
        if let Some((w, p)) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(|e| Error::io(&*p, e.into()))?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(&*p, e))?;
        }
        let score = val_acc.unwrap_or(entry.train_acc);
        let improved = best.map_or(true, |(_, b)| score > b);
        if improved {
            best = Some((epoch, score));
        }
        if let Some(o) = outputs {
            let meta = json!({ "epoch": epoch, "steps": steps, "val_acc": val_acc, "train_loss": entry.train_loss });
            let ckpt = checkpoint(model, meta)?;
            if improved {
                ckpt.write(&o.path(RunOutputs::BEST))?;
            }
            ckpt.write(&o.path(RunOutputs::LAST))?;
        }
        log.push(entry);
        if stop {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { log, best, steps })
}

fn training_view(data: &ClipDataset) -> ClipDataset {
    let mut opts = data.options.clone();
    opts.sampling.mode = SamplingMode::RandomStart;
    data.with_options(opts)
}

fn eval_view(data: &ClipDataset) -> ClipDataset {
    let mut opts = data.options.clone();
    opts.sampling.mode = SamplingMode::CenterStart;
    data.with_options(opts)
}

/// Joint training of both streams and the fusion head. Training clips use
/// random-start sampling, validation clips centre-start.
pub fn train_ageformer(
    model: &mut AgeFormer,
    train: &ClipDataset,
    val: Option<&ClipDataset>,
    cfg: &TrainConfig,
    outputs: Option<&RunOutputs>,
) -> Result<TrainOutcome> {
    let train = training_view(train);
    let val = val.map(eval_view);
    let net = model.net.clone();
    let load = |i: usize, seed: u64| -> Result<Labeled<ModelInput<f32>>> {
        let s = train.sample(i, seed)?;
        Ok(Labeled {
            x: net.input(&s.clip, &s.face)?,
            label: train.label(i),
        })
    };
    let validate = |m: &AgeFormer| -> Result<f64> { Ok(evaluate(m, val.as_ref().expect("val set"))?.report.accuracy) };
    let checkpoint = |m: &AgeFormer, meta| m.checkpoint(meta);
    run_epochs(
        model,
        train.len(),
        &load,
        val.as_ref().map(|_| &validate as &dyn Fn(&AgeFormer) -> Result<f64>),
        &checkpoint,
        cfg,
        outputs,
    )
}

pub const FACE_CLASSIFIER_KIND: &str = "face_classifier";

/// Face backbone with a linear classifier on its pooled feature; the
/// face-only benchmark model.
#[derive(Clone, Debug)]
pub struct FaceClassifier {
    pub cfg: FaceBackboneConfig,
    pub backbone: FaceBackbone,
    pub head: LinearIds,
    pub store: ParamStore<f32>,
    pub norm: Normalization,
}

impl FaceClassifier {
    pub fn new(cfg: &FaceBackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = FaceBackbone::register(cfg, &mut store, "face", &mut rng)?;
        let d = cfg.out_dim;
        let head = add_linear(&mut store, "face_classifier", d, crate::datamodel::NUM_CLASSES, (1.0 / d as f64).sqrt(), &mut rng);
        Ok(FaceClassifier {
            cfg: cfg.clone(),
            backbone,
            head,
            store,
            norm: Normalization::default(),
        })
    }

    fn logits<E: Exec<f32>>(&self, e: &mut E, x: &Array2<f32>) -> E::T {
        let f = self.backbone.forward(e, x);
        e.linear(&f, self.head.w, Some(self.head.b))
    }

    /// Normalized `(H W) x 3` input matrix of a face crop.
    pub fn input(&self, face: &FaceInput) -> Result<Array2<f32>> {
        let mut face = face.clone();
        if face.present {
            self.norm.apply(&mut face.pixels);
        }
        face_matrix(&face, &self.cfg)
    }

    pub fn predict(&self, face: &FaceInput) -> Result<Prediction> {
        let x = self.input(face)?;
        let mut e = Eager::new(&self.store);
        Ok(Prediction::from_logits(&logit_row(&self.logits(&mut e, &x))))
    }

    pub fn distribution(&self, face: &FaceInput) -> Result<ClassDistribution> {
        Ok(self.predict(face)?.distribution)
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        Checkpoint::from_store(FACE_CLASSIFIER_KIND, &self.cfg, meta, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != FACE_CLASSIFIER_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a '{FACE_CLASSIFIER_KIND}' checkpoint, found '{}'",
                ckpt.kind
            )));
        }
        let mut model = FaceClassifier::new(&ckpt.config_as()?, 0)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

impl TrainModel for FaceClassifier {
    type Input = Array2<f32>;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn example_loss(&self, g: &mut Graph<'_, f32>, x: &Array2<f32>, label: AgeClass) -> Result<(Var, Vec<f64>)> {
        let logits = self.logits(g, x);
        let row = logit_row(g.value(&logits));
        Ok((g.cross_entropy(&logits, label.index()), row))
    }
}

impl Classifier for FaceClassifier {
    fn predict_sample(&self, sample: &Sample) -> Result<Prediction> {
        let x = face_matrix(&sample.face, &self.cfg)?;
        let mut e = Eager::new(&self.store);
        Ok(Prediction::from_logits(&logit_row(&self.logits(&mut e, &x))))
    }
}

/// Accuracy of `model` on face crops.
pub fn face_accuracy(model: &FaceClassifier, crops: &[FaceCrop]) -> Result<f64> {
    let preds = crops.iter().map(|c| Ok(model.predict(&c.face)?.class)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<AgeClass> = crops.iter().map(|c| c.label).collect();
    Ok(compute_metrics(&preds, &labels)?.accuracy)
}

/// Trains the face-only benchmark model on aligned crops.
pub fn train_face_benchmark(
    model: &mut FaceClassifier,
    train: &[FaceCrop],
    val: Option<&[FaceCrop]>,
    cfg: &FaceBenchConfig,
    outputs: Option<&RunOutputs>,
) -> Result<TrainOutcome> {
    let inputs = train.iter().map(|c| model.input(&c.face)).collect::<Result<Vec<_>>>()?;
    let load = |i: usize, _seed: u64| -> Result<Labeled<Array2<f32>>> {
        Ok(Labeled {
            x: inputs[i].clone(),
            label: train[i].label,
        })
    };
    let validate = |m: &FaceClassifier| face_accuracy(m, val.expect("val set"));
    let checkpoint = |m: &FaceClassifier, meta| m.checkpoint(meta);
    run_epochs(
        model,
        train.len(),
        &load,
        val.map(|_| &validate as &dyn Fn(&FaceClassifier) -> Result<f64>),
        &checkpoint,
        cfg,
        outputs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::{Init, ParamKind};
    use approx::assert_relative_eq;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.video.depth = 1;
        cfg.video.embed_dim = 32;
        cfg.video.heads = 2;
        cfg.video.frames = 2;
        cfg.video.height = 32;
        cfg.video.width = 32;
        cfg.fusion.fused_dim = 32;
        cfg.fusion.heads = 4;
        cfg
    }

    fn example(cfg: &ModelConfig, model: &AgeFormer, seed: u64, label: AgeClass) -> Labeled<ModelInput<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = &cfg.video;
        let frames = ndarray::Array4::from_shape_simple_fn((v.frames, v.height, v.width, 3), || rng.gen::<f32>());
        let clip = crate::preprocessing::VideoClip::new(frames, (0..v.frames).collect());
        Labeled {
            x: model.net.input(&clip, &FaceInput::absent(288)).unwrap(),
            label,
        }
    }

    #[test]
    fn schedule_is_geometric() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 3e-5);
        assert_relative_eq!(cfg.lr_at(1), 2.7e-5, max_relative = 1e-12);
        assert_relative_eq!(cfg.lr_at(2), 2.43e-5, max_relative = 1e-12);
        assert_relative_eq!(TrainConfig::face_benchmark().lr_at(1), 2e-3 * 0.9, max_relative = 1e-12);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 1.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn zero_gradient_step_without_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Init::ones::<f32>(3, 2), ParamKind::Weight);
        let before = store.clone();
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(id, &Array2::zeros((3, 2)));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..3 {
            opt.step(&mut store, &grads, 1e-2);
        }
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn adamw_matches_hand_computed_first_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 2.0f32), ParamKind::Weight);
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(id, &Array2::from_elem((1, 1), 0.5));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut store, &grads, 0.01);
        // decay: 2 * (1 - 0.001); first Adam step moves by lr * sign(g).
        let want = 2.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert_relative_eq!(store.get(id)[[0, 0]] as f64, want, max_relative = 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Init::zeros::<f32>(1, 2), ParamKind::Weight);
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(id, &Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap());
        assert_relative_eq!(clip_grad_norm(&mut grads, 1.0), 5.0, max_relative = 1e-6);
        assert!((grads.global_norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn uniform_predictor_loss_is_ln4() {
        let cfg = tiny();
        let mut model = AgeFormer::new(&cfg, 0).unwrap();
        let w = model.store.id("fusion.classifier.w").unwrap();
        let b = model.store.id("fusion.classifier.b").unwrap();
        model.store.get_mut(w).fill(0.0);
        model.store.get_mut(b).fill(0.0);
        let ex = example(&cfg, &model, 1, AgeClass::Adult);
        let mut g = Graph::new(&model.store, false, 0);
        let (loss, _) = model.example_loss(&mut g, &ex.x, ex.label).unwrap();
        assert_relative_eq!(g.value(&loss)[[0, 0]] as f64, 4f64.ln(), max_relative = 1e-6);
    }

    #[test]
    fn steps_are_deterministic_and_reduce_loss() {
        let cfg = tiny();
        let run = || {
            let mut model = AgeFormer::new(&cfg, 2).unwrap();
            let batch: Vec<_> = (0..4).map(|i| example(&cfg, &model, i, AgeClass::from_index(i as usize).unwrap())).collect();
            let tc = TrainConfig {
                lr: 1e-3,
                ..Default::default()
            };
            let mut trainer = Trainer::new(&model, &tc).unwrap();
            (0..6).map(|s| trainer.step(&mut model, &batch, tc.lr, (0, s), 5).unwrap().loss).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.last().unwrap() < a.first().unwrap(), "{a:?}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let cfg = tiny();
        let mut model = AgeFormer::new(&cfg, 3).unwrap();
        let before = model.store.clone();
        let batch = vec![example(&cfg, &model, 0, AgeClass::Elderly)];
        let tc = TrainConfig {
            frozen_prefixes: vec!["face.".into()],
            ..Default::default()
        };
        let mut trainer = Trainer::new(&model, &tc).unwrap();
        trainer.step(&mut model, &batch, 1e-3, (0, 0), 0).unwrap();
        for (id, p) in before.iter() {
            let moved = p.value != model.store.get(id);
            if p.name.starts_with("face.") || p.kind == ParamKind::Buffer {
                assert!(!moved, "{}", p.name);
            }
        }
        assert_ne!(before.get(model.store.id("video.cls").unwrap()), model.store.get(model.store.id("video.cls").unwrap()));
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let cfg = tiny();
        let mut model = AgeFormer::new(&cfg, 4).unwrap();
        let b = model.store.id("fusion.classifier.b").unwrap();
        model.store.get_mut(b).fill(f32::NAN);
        let batch = vec![example(&cfg, &model, 0, AgeClass::Adult)];
        let mut trainer = Trainer::new(&model, &TrainConfig::default()).unwrap();
        match trainer.step(&mut model, &batch, 3e-5, (2, 7), 0) {
            Err(Error::NonFiniteLoss { epoch: 2, batch: 7, .. }) => {}
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn face_classifier_has_no_video_parameters() {
        let model = FaceClassifier::new(&FaceBackboneConfig::desk(), 0).unwrap();
        assert!(model.store.iter().all(|(_, p)| !p.name.starts_with("video.")));
        assert!(model.store.id("face_classifier.w").is_some());
    }
}
