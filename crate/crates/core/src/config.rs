//! Run configuration: one TOML document with a section per module.
//!
//! A preset (`desk` or `paper`) supplies every value; a config file and
//! `--set key=value` overrides are merged over it, in that order, before
//! validation. Unknown keys, badly typed values and violated constraints are
//! all reported together as a schema error.
//!
//! ```toml
//! preset = "desk"
//! seed = 0
//!
//! [model]          # video backbone
//! patch = 16
//! frames = 8
//!
//! [data]
//! manifest = "data/manifest.jsonl"
//! stride = 4
//!
//! [train]
//! lr = 3e-5
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::datamodel::SplitSpec;
use crate::face_backbone::FaceBackboneConfig;
use crate::fusion_head::FusionConfig;
use crate::model::ModelConfig;
use crate::preprocessing::{Normalization, PrivacyMode, SampleOptions, SamplingConfig, SamplingMode};
use crate::training::TrainConfig;
use crate::video_backbone::VideoBackboneConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small enough to train on a CPU.
    Desk,
    /// The full-size architecture and protocol.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Schema(vec![format!("preset: unknown preset {other:?} (expected desk or paper)")])),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Relative video paths resolve against this directory, or against the
    /// manifest's directory when unset.
    pub base_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub stride: usize,
    /// Train, validation and test fractions of the stratified split.
    pub split: [f64; 3],
    pub normalization: Normalization,
    /// Obscures faces in the main stream and drops the face input.
    pub privacy: Option<PrivacyMode>,
    /// Frames per video drawn for the face-crop dataset, and their spacing.
    pub face_frames: usize,
    pub face_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            base_dir: None,
            cache_dir: None,
            stride: 4,
            split: [0.76, 0.12, 0.12],
            normalization: Normalization::default(),
            privacy: None,
            face_frames: 10,
            face_stride: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    /// Model initialization and split shuffling; `--seed` also sets the
    /// training seeds.
    pub seed: u64,
    pub model: VideoBackboneConfig,
    pub face: FaceBackboneConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub face_train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        };
        RunConfig {
            preset,
            seed: 0,
            model: model.video,
            face: model.face,
            fusion: model.fusion,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            face_train: TrainConfig::face_benchmark(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            video: self.model.clone(),
            face: self.face.clone(),
            fusion: self.fusion.clone(),
        }
    }

    /// Clip sampling matching the model's input, in `mode`.
    pub fn sampling(&self, mode: SamplingMode) -> SamplingConfig {
        SamplingConfig {
            frames: self.model.frames,
            stride: self.data.stride,
            mode,
            clip_height: self.model.height,
            clip_width: self.model.width,
            face_size: self.face.input_size,
        }
    }

    pub fn sample_options(&self, mode: SamplingMode) -> SampleOptions {
        let mut o = SampleOptions::new(self.sampling(mode));
        o.privacy = self.data.privacy;
        o
    }

    /// Sampling of the face-crop dataset.
    pub fn face_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            frames: self.data.face_frames,
            stride: self.data.face_stride,
            mode: SamplingMode::CenterStart,
            clip_height: self.model.height,
            clip_width: self.model.width,
            face_size: self.face.input_size,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            fractions: self.data.split,
            seed: self.seed,
        }
    }

    /// Every violated constraint, each led by its dotted key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model_config().problems();
        p.extend(self.train.problems("train."));
        p.extend(self.face_train.problems("face_train."));
        let d = &self.data;
        if d.stride == 0 {
            p.push("data.stride: must be >= 1".into());
        }
        if d.face_frames == 0 {
            p.push("data.face_frames: must be >= 1".into());
        }
        if d.face_stride == 0 {
            p.push("data.face_stride: must be >= 1".into());
        }
        if let Err(e) = self.split_spec().validate() {
            p.push(format!("data.split: {e}"));
        }
        if let Err(e) = d.normalization.validate() {
            p.push(format!("data.normalization: {e}"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(p))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved document.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Every key the schema accepts, as a document with all optional values
    /// filled in.
    fn schema() -> Value {
        let mut full = RunConfig::preset(Preset::Desk);
        full.data.manifest = Some(PathBuf::new());
        full.data.base_dir = Some(PathBuf::new());
        full.data.cache_dir = Some(PathBuf::new());
        full.data.privacy = Some(PrivacyMode::Blur);
        for t in [&mut full.train, &mut full.face_train] {
            t.clip_norm = Some(1.0);
            t.max_steps = Some(1);
        }
        Value::try_from(full).expect("run config serializes")
    }
}

/// A `key=value` override. The value is read as a TOML literal, falling back
/// to a plain string, so `model.patch=8`, `data.split=[0.8,0.1,0.1]` and
/// `data.manifest=m.jsonl` all work.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: Vec<String>,
    pub value: Value,
}

impl FromStr for Override {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {s:?} is not key=value")))?;
        let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if key.iter().any(|k| k.is_empty()) {
            return Err(Error::InvalidArgument(format!("override {s:?} has an empty key segment")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Override { key, value })
    }
}

impl fmt::Display for Override {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key.join("."), self.value)
    }
}

/// Writes `value` at `path`, creating tables on the way.
fn set_path(doc: &mut toml::Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = doc;
    for (i, k) in parents.iter().enumerate() {
        let entry = table.entry(k.clone()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Schema(vec![format!("{}: is not a table", path[..=i].join("."))])
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Keys of `doc` absent from `schema`, dotted. Tables recurse; any other
/// schema value accepts whatever sits under its key.
fn unknown_keys(doc: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in doc {
        let key = format!("{prefix}{k}");
        match (schema.get(k), v) {
            (None, _) => out.push(format!("{key}: unknown key")),
            (Some(Value::Table(s)), Value::Table(d)) => unknown_keys(d, s, &format!("{key}."), out),
            _ => {}
        }
    }
}

/// Where a run configuration comes from.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub overrides: Vec<Override>,
    pub seed: Option<u64>,
}

impl ConfigSources {
    /// Expands the preset, merges file and overrides, and validates.
    pub fn resolve(&self) -> Result<RunConfig> {
        let file_doc = match &self.file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Parse {
                    source_name: path.display().to_string(),
                    line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
                    message: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        let mut user = file_doc;
        for o in &self.overrides {
            set_path(&mut user, &o.key, o.value.clone())?;
        }
        if let Some(seed) = self.seed {
            for key in [&["seed"][..], &["train", "seed"], &["face_train", "seed"]] {
                let key: Vec<String> = key.iter().map(|s| s.to_string()).collect();
                set_path(&mut user, &key, Value::Integer(seed as i64))?;
            }
        }
        let preset = match (self.preset, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(other)) => {
                return Err(Error::Schema(vec![format!("preset: expected a string, found {other}")]));
            }
            (None, None) => Preset::Desk,
        };
        user.insert("preset".into(), Value::String(preset.to_string()));

        let mut unknown = Vec::new();
        let schema = RunConfig::schema();
        unknown_keys(&user, schema.as_table().expect("table"), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Schema(unknown));
        }
        let mut doc = match Value::try_from(RunConfig::preset(preset)).expect("run config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("structs serialize to tables"),
        };
        merge(&mut doc, user);
        let cfg: RunConfig = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Schema(vec![e.message().trim().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(items: &[&str]) -> ConfigSources {
        ConfigSources {
            overrides: items.iter().map(|s| s.parse().unwrap()).collect(),
            ..Default::default()
        }
    }

    fn schema_errors(r: Result<RunConfig>) -> Vec<String> {
        match r {
            Err(Error::Schema(v)) => v,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Paper] {
            RunConfig::preset(p).validate().unwrap();
        }
        let paper = ConfigSources {
            preset: Some(Preset::Paper),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(paper.model.embed_dim, 768);
        assert_eq!(paper.face.out_dim, 1408);
        assert_eq!(paper.sampling(SamplingMode::RandomStart), SamplingConfig::paper());
    }

    #[test]
    fn indivisible_patch_is_a_schema_error() {
        let mut s = sets(&["model.patch=17"]);
        s.preset = Some(Preset::Paper);
        let errs = schema_errors(s.resolve());
        assert!(errs.contains(&"model.patch: height 224 is not divisible by patch size 17".to_string()), "{errs:?}");
    }

    #[test]
    fn every_unknown_key_listed() {
        let errs = schema_errors(sets(&["model.patches=4", "trian.lr=1", "data.stride=2"]).resolve());
        assert_eq!(errs, ["model.patches: unknown key", "trian: unknown key"]);
    }

    #[test]
    fn overrides_and_file_merge_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[train]\nlr = 1e-3\nmax_steps = 7\n[data]\nmanifest = \"m.jsonl\"\n").unwrap();
        let cfg = ConfigSources {
            file: Some(path),
            overrides: vec!["train.lr=2e-3".parse().unwrap(), "data.privacy=blur".parse().unwrap()],
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lr, 2e-3);
        assert_eq!(cfg.train.max_steps, Some(7));
        assert_eq!(cfg.train.epochs, 25);
        assert_eq!(cfg.data.manifest.as_deref(), Some(Path::new("m.jsonl")));
        assert_eq!(cfg.data.privacy, Some(PrivacyMode::Blur));
    }

    #[test]
    fn resolved_document_round_trips() {
        let mut s = sets(&["model.depth=2", "fusion.heads=4"]);
        s.seed = Some(9);
        let cfg = s.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.face_train.seed), (9, 9, 9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        cfg.write(&path).unwrap();
        let again = ConfigSources {
            file: Some(path),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn type_errors_are_schema_errors() {
        let errs = schema_errors(sets(&["train.lr=\"fast\""]).resolve());
        assert!(errs[0].contains("lr") || errs[0].contains("f64"), "{errs:?}");
        assert!(sets(&["preset=tiny"]).resolve().is_err());
        assert!("novalue".parse::<Override>().is_err());
    }
}
