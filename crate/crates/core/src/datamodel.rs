//! Dataset manifests, age labels, stratified splitting and dataset statistics.
//!
//! A manifest is JSON Lines, one video per line:
//!
//! ```text
//! {"id":"v1","path":"clips/v1.agv","label":"toddler","frame_count":120,"fps":27.0,
//!  "width":1920,"height":1080,
//!  "face_boxes":{"0":{"box":[x1,y1,x2,y2],"eyes":[[lx,ly],[rx,ry]]}},
//!  "person_boxes":{"0":[x1,y1,x2,y2]},
//!  "split":"train"}
//! ```
//!
//! `width`, `height`, `face_boxes`, `person_boxes` and `split` are optional.
//! Coordinates are continuous pixel units (pixel `i` spans `[i, i+1)`).
//! Frame sizes, when given, bound every box.
//!
//! Label aliases (case-insensitive, `-` and spaces read as `_`):
//!
//! | class          | accepted labels                                           |
//! |----------------|-----------------------------------------------------------|
//! | `BabyToddler`  | `baby_toddler`, `baby/toddler`, `baby`, `toddler`, `child`, `kid` |
//! | `Adolescent`   | `adolescent`, `teen`, `teenager`                          |
//! | `Adult`        | `adult`                                                   |
//! | `Elderly`      | `elderly`, `old`, `senior`                                |
//!
//! Manifests are always written with the canonical name in the first column.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four ordinal age groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgeClass {
    BabyToddler = 0,
    Adolescent = 1,
    Adult = 2,
    Elderly = 3,
}

pub const NUM_CLASSES: usize = 4;

impl AgeClass {
    pub const ALL: [AgeClass; NUM_CLASSES] = [
        AgeClass::BabyToddler,
        AgeClass::Adolescent,
        AgeClass::Adult,
        AgeClass::Elderly,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<AgeClass> {
        AgeClass::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AgeClass::BabyToddler => "baby_toddler",
            AgeClass::Adolescent => "adolescent",
            AgeClass::Adult => "adult",
            AgeClass::Elderly => "elderly",
        }
    }

    /// Resolves a manifest label through the alias table.
    pub fn parse_label(raw: &str) -> Option<AgeClass> {
        let norm: String = raw
            .trim()
            .chars()
            .map(|c| match c {
                '-' | ' ' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        match norm.as_str() {
            "baby_toddler" | "baby/toddler" | "baby_/_toddler" | "babytoddler" | "baby"
            | "toddler" | "child" | "kid" => Some(AgeClass::BabyToddler),
            "adolescent" | "teen" | "teenager" => Some(AgeClass::Adolescent),
            "adult" => Some(AgeClass::Adult),
            "elderly" | "old" | "senior" => Some(AgeClass::Elderly),
            _ => None,
        }
    }
}

impl fmt::Display for AgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgeClass::parse_label(s).ok_or_else(|| Error::Validation(format!("unknown label {s:?}")))
    }
}

impl Serialize for AgeClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AgeClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        AgeClass::parse_label(&raw).ok_or_else(|| serde::de::Error::custom(format!("unknown label {raw:?}")))
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]` in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x1 && p[0] <= self.x2 && p[1] >= self.y1 && p[1] <= self.y2
    }

    fn check(&self, what: &str, bounds: Option<(f64, f64)>) -> std::result::Result<(), String> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(format!("{what}: non-finite coordinate"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(format!("{what}: degenerate box {coords:?}"));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 {
            return Err(format!("{what}: box {coords:?} outside frame"));
        }
        if let Some((w, h)) = bounds {
            if self.x2 > w || self.y2 > h {
                return Err(format!("{what}: box {coords:?} outside {w}x{h} frame"));
            }
        }
        Ok(())
    }
}

/// Detected face of one frame: its box and the two eye centres (left, right in
/// image order).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub eyes: [[f64; 2]; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub path: String,
    pub label: AgeClass,
    pub frame_count: usize,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub face_boxes: BTreeMap<usize, FaceAnnotation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub person_boxes: BTreeMap<usize, BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, path: impl Into<String>, label: AgeClass, frame_count: usize, fps: f64) -> Self {
        VideoRecord {
            id: id.into(),
            path: path.into(),
            label,
            frame_count,
            fps,
            width: None,
            height: None,
            face_boxes: BTreeMap::new(),
            person_boxes: BTreeMap::new(),
            split: None,
        }
    }

    pub fn has_faces(&self) -> bool {
        !self.face_boxes.is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.frame_count < 1 {
            return Err(format!("{}: frame_count must be >= 1", self.id));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("{}: fps must be positive", self.id));
        }
        let bounds = match (self.width, self.height) {
            (Some(w), Some(h)) => Some((w as f64, h as f64)),
            _ => None,
        };
        for (&frame, face) in &self.face_boxes {
            let what = format!("{} face_boxes[{frame}]", self.id);
            if frame >= self.frame_count {
                return Err(format!("{what}: frame index beyond frame_count {}", self.frame_count));
            }
            face.bbox.check(&what, bounds)?;
            for eye in face.eyes {
                if !face.bbox.contains(eye) {
                    return Err(format!("{what}: eye {eye:?} outside its box"));
                }
            }
        }
        for (&frame, bbox) in &self.person_boxes {
            let what = format!("{} person_boxes[{frame}]", self.id);
            if frame >= self.frame_count {
                return Err(format!("{what}: frame index beyond frame_count {}", self.frame_count));
            }
            bbox.check(&what, bounds)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<VideoRecord>,
}

/// Reads a JSON Lines manifest. Blank lines are skipped.
pub fn load_manifest<R: BufRead>(reader: R, source_name: &str) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(label) = value.get("label").and_then(|l| l.as_str()) {
            if AgeClass::parse_label(label).is_none() {
                return Err(Error::Validation(format!(
                    "{source_name}: line {line_no}: unknown label {label:?}"
                )));
            }
        }
        let record: VideoRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|m| Error::Validation(format!("{source_name}: line {line_no}: {m}")))?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Validation(format!(
                "{source_name}: line {line_no}: duplicate id {:?}",
                record.id
            )));
        }
        records.push(record);
    }
    Ok(DatasetManifest { records })
}

pub fn load_manifest_file(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_manifest(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_manifest<W: Write>(manifest: &DatasetManifest, mut writer: W) -> Result<()> {
    for r in &manifest.records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(writer, "{line}").map_err(|e| Error::io("<manifest writer>", e))?;
    }
    Ok(())
}

pub fn write_manifest_file(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_manifest(manifest, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    pub fn new(records: Vec<VideoRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate().map_err(Error::Validation)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records tagged with `tag`, in manifest order.
    pub fn subset(&self, tag: SplitTag) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| r.split == Some(tag)).cloned().collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }
}

/// Train/val/test fractions and the shuffling seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            fractions: [train, val, test],
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 76 / 12 / 12.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            fractions: [0.76, 0.12, 0.12],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (f, tag) in self.fractions.iter().zip(SplitTag::ALL) {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::Validation(format!(
                    "{} fraction {f} must lie strictly between 0 and 1",
                    tag.name()
                )));
            }
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`; ties in the
/// remainder go to the earlier split.
pub fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // Absorb representation error so 0.76 * 25 floors to 19, not 18.
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = (q + 1e-9).floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Remainders are compared on a 1e-9 grid, so 0.16 * 40 and 0.66 * 40
    // count as the same tie.
    let grid = |i: usize| ((quotas[i] - counts[i] as f64) * 1e9).round() as i64;
    order.sort_by(|&a, &b| grid(b).cmp(&grid(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Tags every record train/val/test, class by class.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut out = manifest.clone();
    for class in AgeClass::ALL {
        let mut members: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::InsufficientClass {
                class: class.name().to_string(),
                count: members.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(class.index() as u64 + 1)));
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &spec.fractions);
        let mut it = members.into_iter();
        for (tag, count) in SplitTag::ALL.into_iter().zip(counts) {
            for idx in it.by_ref().take(count) {
                out.records[idx].split = Some(tag);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub age_group: AgeClass,
    pub videos: usize,
    pub min_frames: Option<usize>,
    pub avg_frames: Option<f64>,
    pub max_frames: Option<usize>,
    pub no_face_videos: usize,
}

/// Per-class video counts and frame-count ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub classes: Vec<ClassStats>,
    pub total_videos: usize,
    pub no_face_videos: usize,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> Result<StatsReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let classes = AgeClass::ALL
        .iter()
        .map(|&class| {
            let frames: Vec<usize> = manifest
                .records
                .iter()
                .filter(|r| r.label == class)
                .map(|r| r.frame_count)
                .collect();
            let no_face = manifest
                .records
                .iter()
                .filter(|r| r.label == class && !r.has_faces())
                .count();
            ClassStats {
                age_group: class,
                videos: frames.len(),
                min_frames: frames.iter().copied().min(),
                avg_frames: (!frames.is_empty()).then(|| frames.iter().sum::<usize>() as f64 / frames.len() as f64),
                max_frames: frames.iter().copied().max(),
                no_face_videos: no_face,
            }
        })
        .collect();
    Ok(StatsReport {
        classes,
        total_videos: manifest.len(),
        no_face_videos: manifest.records.iter().filter(|r| !r.has_faces()).count(),
    })
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>7} {:>6} {:>8} {:>6}", "age group", "videos", "min", "avg", "max")?;
        for c in &self.classes {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                f,
                "{:<14} {:>7} {:>6} {:>8} {:>6}",
                c.age_group.name(),
                c.videos,
                opt(c.min_frames),
                c.avg_frames.map_or("-".to_string(), |a| format!("{a:.1}")),
                opt(c.max_frames)
            )?;
        }
        writeln!(f, "total videos: {}", self.total_videos)?;
        write!(f, "no-face videos: {}", self.no_face_videos)
    }
}
