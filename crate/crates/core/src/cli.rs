//! Command-line entry point: one subcommand per pipeline stage.
//!
//! Every command writes into its run directory (`--out-dir`, default
//! `runs/<command>`): the resolved `config.toml`, the invocation in
//! `command.txt`, a `run.log`, and the command's outputs. Inputs are only
//! read.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, AGEFORMER_KIND};
use crate::config::{ConfigSources, Override, Preset, RunConfig};
use crate::datamodel::{dataset_stats, load_manifest_file, stratified_split, write_manifest_file, DatasetManifest, SplitTag};
use crate::evaluation::{
    attention_rollout, evaluate, infer_tracklets, load_tracklet_manifest_file, robustness_sweep, SweepAxis,
};
use crate::model::{AgeFormer, Classifier};
use crate::preprocessing::{build_face_crops, ClipDataset, PrivacyMode, SamplingMode};
use crate::training::{train_ageformer, train_face_benchmark, FaceClassifier, RunOutputs, FACE_CLASSIFIER_KIND};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ageformer", version, about = "Apparent age classification from video")]
pub struct Cli {
    /// TOML run configuration merged over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.lr=1e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for splitting, initialization and both training runs
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Debug-level logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    /// Every record, tagged or not.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrivacyArg {
    Blur,
    Blackout,
}

impl From<PrivacyArg> for PrivacyMode {
    fn from(p: PrivacyArg) -> Self {
        match p {
            PrivacyArg::Blur => PrivacyMode::Blur,
            PrivacyArg::Blackout => PrivacyMode::Blackout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Resolution,
    Stride,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Resolution => SweepAxis::Resolution,
            AxisArg::Stride => SweepAxis::Stride,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ManifestArg {
    /// JSON Lines manifest; defaults to `data.manifest`.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Which split tag of the manifest to use.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Tags a manifest train/val/test, class by class.
    Split(ManifestArg),
    /// Per-class counts and frame-count ranges.
    Stats(ManifestArg),
    /// Prepares centre-sampled clips into the clip cache.
    Preprocess(SelectArgs),
    /// Joint training on the train split, selecting on the val split.
    Train(ManifestArg),
    /// Face-only benchmark training on aligned face crops.
    TrainFace(ManifestArg),
    /// Scores a checkpoint.
    Eval {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Predicts the age class of every person tracklet.
    Infer {
        #[arg(long, value_name = "FILE")]
        tracklets: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Attention-rollout heatmaps of selected clips.
    Rollout {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Record ids; defaults to the first record.
        #[arg(long = "id")]
        ids: Vec<String>,
    },
    /// Evaluation while varying frame resolution or sampling stride.
    Sweep {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated, strictly monotone: frame heights or strides
        #[arg(long, value_delimiter = ',', required = true)]
        settings: Vec<usize>,
    },
    /// Writes face-obscured clips to the clip cache, with a preview frame
    /// each.
    Augment {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, value_enum)]
        mode: PrivacyArg,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Split(_) => "split",
            Command::Stats(_) => "stats",
            Command::Preprocess(_) => "preprocess",
            Command::Train(_) => "train",
            Command::TrainFace(_) => "train-face",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Rollout { .. } => "rollout",
            Command::Sweep { .. } => "sweep",
            Command::Augment { .. } => "augment",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Copies log lines to stderr and the run log.
struct Tee(std::fs::File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

fn init_logging(run_dir: &Path, verbose: bool) -> Result<()> {
    let path = run_dir.join("run.log");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let level = if verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    // A second initialization in the same process keeps the first logger.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp_secs()
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .try_init();
    Ok(())
}

/// Run directory and configuration of one invocation.
pub struct RunContext {
    pub dir: PathBuf,
    pub cfg: RunConfig,
}

impl RunContext {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).expect("row serializes"));
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn manifest_path(&self, arg: &ManifestArg) -> Result<PathBuf> {
        arg.manifest
            .clone()
            .or_else(|| self.cfg.data.manifest.clone())
            .ok_or_else(|| Error::InvalidArgument("no manifest given (--manifest or data.manifest)".into()))
    }

    fn base_dir(&self, manifest: &Path) -> Option<PathBuf> {
        self.cfg
            .data
            .base_dir
            .clone()
            .or_else(|| manifest.parent().map(Path::to_path_buf))
    }

    fn load(&self, arg: &ManifestArg) -> Result<(DatasetManifest, Option<PathBuf>)> {
        let path = self.manifest_path(arg)?;
        let m = load_manifest_file(&path)?;
        info!("{}: {} records", path.display(), m.len());
        Ok((m, self.base_dir(&path)))
    }

    fn dataset(&self, manifest: &DatasetManifest, base: Option<PathBuf>, mode: SamplingMode) -> ClipDataset {
        let ds = ClipDataset::new(manifest, base, self.cfg.sample_options(mode), self.cfg.data.normalization);
        match &self.cfg.data.cache_dir {
            Some(dir) => ds.with_cache_dir(dir),
            None => ds,
        }
    }

    fn selected(&self, select: &SelectArgs, mode: SamplingMode) -> Result<ClipDataset> {
        let (m, base) = self.load(&select.manifest)?;
        let m = subset(&m, select.split)?;
        Ok(self.dataset(&m, base, mode))
    }

    fn cache_dir(&self) -> PathBuf {
        self.cfg.data.cache_dir.clone().unwrap_or_else(|| self.path("cache"))
    }
}

fn subset(m: &DatasetManifest, split: SplitArg) -> Result<DatasetManifest> {
    let tag = match split {
        SplitArg::All => return Ok(m.clone()),
        SplitArg::Train => SplitTag::Train,
        SplitArg::Val => SplitTag::Val,
        SplitArg::Test => SplitTag::Test,
    };
    let s = m.subset(tag);
    if s.is_empty() {
        return Err(Error::Validation(format!(
            "manifest has no records tagged {:?}; run `split` first",
            tag.name()
        )));
    }
    Ok(s)
}

/// An AgeFormer or face-only checkpoint, checked against the configuration.
fn load_classifier(path: &Path, cfg: &RunConfig) -> Result<Box<dyn Classifier>> {
    let ckpt = Checkpoint::read(path)?;
    match ckpt.kind.as_str() {
        AGEFORMER_KIND => Ok(Box::new(AgeFormer::load_expecting(path, &cfg.model_config())?)),
        FACE_CLASSIFIER_KIND => Ok(Box::new(FaceClassifier::from_checkpoint(&ckpt)?)),
        other => Err(Error::Checkpoint(format!("{}: unknown checkpoint kind '{other}'", path.display()))),
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let overrides = cli.overrides.iter().map(|s| s.parse::<Override>()).collect::<Result<Vec<_>>>()?;
    ConfigSources {
        file: cli.config.clone(),
        preset: cli.preset.map(Into::into),
        overrides,
        seed: cli.seed,
    }
    .resolve()
}

pub fn run(cli: &Cli, argv: &[std::ffi::OsString]) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let dir = cli.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    init_logging(&dir, cli.verbose)?;
    cfg.write(&dir.join("config.toml"))?;
    let invocation: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cmd_path = dir.join("command.txt");
    std::fs::write(&cmd_path, invocation.join(" ") + "\n").map_err(|e| Error::io(&cmd_path, e))?;
    let ctx = RunContext { dir, cfg };
    info!("{} -> {}", cli.command.name(), ctx.dir.display());
    dispatch(&ctx, &cli.command)
}

fn dispatch(ctx: &RunContext, command: &Command) -> Result<()> {
    let cfg = &ctx.cfg;
    match command {
        Command::Split(arg) => {
            let (m, _) = ctx.load(arg)?;
            let tagged = stratified_split(&m, &cfg.split_spec())?;
            write_manifest_file(&tagged, &ctx.path("split.jsonl"))?;
            let mut stats = serde_json::Map::new();
            stats.insert("all".into(), serde_json::to_value(dataset_stats(&tagged)?).expect("stats"));
            for tag in SplitTag::ALL {
                let part = tagged.subset(tag);
                write_manifest_file(&part, &ctx.path(&format!("{}.jsonl", tag.name())))?;
                info!("{}: {} records", tag.name(), part.len());
                if !part.is_empty() {
                    stats.insert(tag.name().into(), serde_json::to_value(dataset_stats(&part)?).expect("stats"));
                }
            }
            ctx.write_json("stats.json", &stats)?;
        }
        Command::Stats(arg) => {
            let (m, _) = ctx.load(arg)?;
            let stats = dataset_stats(&m)?;
            println!("{stats}");
            ctx.write_json("stats.json", &stats)?;
        }
        Command::Preprocess(select) => {
            let ds = ctx.selected(select, SamplingMode::CenterStart)?;
            let dir = ctx.cache_dir();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let files = (0..ds.len())
                .map(|i| ds.write_cache(i, &dir).map(|p| p.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            info!("{} clips cached in {}", files.len(), dir.display());
            ctx.write_json("preprocess.json", &files)?;
        }
        Command::Train(arg) => {
            let (m, base) = ctx.load(arg)?;
            let train = ctx.dataset(&subset(&m, SplitArg::Train)?, base.clone(), SamplingMode::RandomStart);
            let val_m = m.subset(SplitTag::Val);
            let val = (!val_m.is_empty()).then(|| ctx.dataset(&val_m, base, SamplingMode::CenterStart));
            if val.is_none() {
                warn!("no validation records; the best checkpoint is chosen by training accuracy");
            }
            let mut model = AgeFormer::new(&cfg.model_config(), cfg.seed)?;
            let outputs = RunOutputs::new(&ctx.dir)?;
            let outcome = train_ageformer(&mut model, &train, val.as_ref(), &cfg.train, Some(&outputs))?;
            ctx.write_json("outcome.json", &outcome)?;
        }
        Command::TrainFace(arg) => {
            let (m, base) = ctx.load(arg)?;
            let sampling = cfg.face_sampling();
            let train = build_face_crops(&subset(&m, SplitArg::Train)?, base.as_deref(), &sampling)?;
            let val_m = m.subset(SplitTag::Val);
            let val = if val_m.is_empty() {
                None
            } else {
                Some(build_face_crops(&val_m, base.as_deref(), &sampling)?)
            };
            info!("{} training crops, {} validation crops", train.len(), val.as_ref().map_or(0, Vec::len));
            if train.is_empty() {
                return Err(Error::Validation("no face crops in the training split".into()));
            }
            let mut model = FaceClassifier::new(&cfg.face, cfg.seed)?;
            model.norm = cfg.data.normalization;
            let outputs = RunOutputs::new(&ctx.dir)?;
            let outcome = train_face_benchmark(
                &mut model,
                &train,
                val.as_deref().filter(|v| !v.is_empty()),
                &cfg.face_train,
                Some(&outputs),
            )?;
            ctx.write_json("outcome.json", &outcome)?;
        }
        Command::Eval { select, checkpoint } => {
            let model = load_classifier(checkpoint, cfg)?;
            let ds = ctx.selected(select, SamplingMode::CenterStart)?;
            let ev = evaluate(model.as_ref(), &ds)?;
            println!("{}", ev.report);
            ctx.write_json("metrics.json", &ev.report)?;
            let rows: Vec<serde_json::Value> = ev
                .ids
                .iter()
                .zip(&ev.predictions)
                .zip(&ev.labels)
                .map(|((id, p), l)| {
                    serde_json::json!({"id": id, "label": l, "predicted": p.class, "probs": p.distribution.probs})
                })
                .collect();
            ctx.write_jsonl("predictions.jsonl", &rows)?;
        }
        Command::Infer { tracklets, checkpoint } => {
            let model = load_classifier(checkpoint, cfg)?;
            let m = load_tracklet_manifest_file(tracklets)?;
            let preds = infer_tracklets(
                model.as_ref(),
                &m,
                ctx.base_dir(tracklets),
                &cfg.sample_options(SamplingMode::CenterStart),
                cfg.data.normalization,
            )?;
            info!("{} of {} tracklets predicted", preds.len(), m.len());
            ctx.write_jsonl("tracklets.jsonl", &preds)?;
        }
        Command::Rollout { select, checkpoint, ids } => {
            let model = AgeFormer::load_expecting(checkpoint, &cfg.model_config())?;
            let ds = ctx.selected(select, SamplingMode::CenterStart)?;
            let picks: Vec<usize> = if ids.is_empty() {
                vec![0]
            } else {
                ids.iter()
                    .map(|id| {
                        ds.records
                            .iter()
                            .position(|r| &r.id == id)
                            .ok_or_else(|| Error::InvalidArgument(format!("no record with id {id:?}")))
                    })
                    .collect::<Result<_>>()?
            };
            for i in picks {
                let s = ds.sample(i, 0)?;
                let map = attention_rollout(&model, &s.clip, &s.face)?;
                let dir = ctx.path("rollout").join(safe_name(&ds.records[i].id));
                let written = map.write(&dir)?;
                info!("{}: {} files in {}", ds.records[i].id, written.len(), dir.display());
            }
        }
        Command::Sweep {
            select,
            checkpoint,
            axis,
            settings,
        } => {
            let model = load_classifier(checkpoint, cfg)?;
            let ds = ctx.selected(select, SamplingMode::CenterStart)?;
            let report = robustness_sweep(model.as_ref(), &ds, (*axis).into(), settings)?;
            for p in &report.points {
                println!("{} {}: accuracy {:.4}  macro F1 {:.4}", report.axis, p.setting, p.report.accuracy, p.report.macro_f1);
            }
            ctx.write_json("sweep.json", &report)?;
        }
        Command::Augment { select, mode } => {
            let mut ds = ctx.selected(select, SamplingMode::CenterStart)?;
            let mut opts = ds.options.clone();
            opts.privacy = Some((*mode).into());
            ds = ds.with_options(opts);
            let dir = ctx.cache_dir();
            let previews = ctx.path("preview");
            for d in [&dir, &previews] {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let mut files = Vec::new();
            for i in 0..ds.len() {
                files.push(ds.write_cache(i, &dir)?.display().to_string());
                let raw = ds.raw(i, 0)?;
                let mid = raw.clip.frames.index_axis(ndarray::Axis(0), raw.clip.num_frames() / 2);
                let path = previews.join(format!("{}.png", safe_name(&ds.records[i].id)));
                write_rgb_png(&mid.to_owned(), &path)?;
            }
            info!("{} obscured clips cached in {}", files.len(), dir.display());
            ctx.write_json("augment.json", &files)?;
        }
    }
    Ok(())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_rgb_png(frame: &ndarray::Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = frame.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (frame[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_rejected() {
        assert!(Cli::try_parse_from(["ageformer", "fly"]).is_err());
        assert_eq!(main_with_args(["ageformer", "fly"]), 2);
    }

    #[test]
    fn global_flags_parse_on_either_side() {
        let c = Cli::try_parse_from([
            "ageformer",
            "--preset",
            "paper",
            "sweep",
            "--checkpoint",
            "c.ckpt",
            "--axis",
            "resolution",
            "--settings",
            "224,112,56",
            "--set",
            "data.stride=2",
        ])
        .unwrap();
        assert_eq!(c.preset, Some(PresetArg::Paper));
        assert_eq!(c.overrides, ["data.stride=2"]);
        match c.command {
            Command::Sweep { settings, .. } => assert_eq!(settings, [224, 112, 56]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_error_exit_code() {
        let c = Cli::try_parse_from(["ageformer", "--preset", "paper", "--set", "model.patch=17", "stats"]).unwrap();
        let err = resolve_config(&c).unwrap_err();
        assert!(err.to_string().contains("model.patch: height 224 is not divisible by patch size 17"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
