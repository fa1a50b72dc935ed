//! Age prediction for person tracklets detected in unlabeled videos.
//!
//! A tracklet manifest uses the video manifest format. Each row is one
//! person; its `person_boxes` give the person's box per frame and the clip is
//! sampled from those frames only, each cropped to the box. `label` may be
//! omitted.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_manifest, AgeClass, DatasetManifest};
use crate::fusion_head::ClassDistribution;
use crate::model::Classifier;
use crate::preprocessing::{ClipDataset, Normalization, SampleOptions};
use crate::{Error, Result};

/// Stands in for a missing label; inference never reads it.
const PLACEHOLDER_LABEL: &str = "adult";

/// Reads a tracklet manifest, accepting rows without `label`.
pub fn load_tracklet_manifest<R: BufRead>(reader: R, source_name: &str) -> Result<DatasetManifest> {
    let mut text = String::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            text.push('\n');
            continue;
        }
        let mut value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("label").or_insert_with(|| PLACEHOLDER_LABEL.into());
        }
        text.push_str(&value.to_string());
        text.push('\n');
    }
    load_manifest(text.as_bytes(), source_name)
}

pub fn load_tracklet_manifest_file(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_tracklet_manifest(std::io::BufReader::new(file), &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletPrediction {
    pub id: String,
    pub path: String,
    /// Frames the tracklet covers.
    pub frames: usize,
    pub class: AgeClass,
    pub distribution: ClassDistribution,
}

/// Predicts every tracklet in manifest order. Tracklets without a person box
/// inside the video are skipped with a warning.
pub fn infer_tracklets(
    model: &dyn Classifier,
    tracklets: &DatasetManifest,
    base_dir: Option<PathBuf>,
    options: &SampleOptions,
    norm: Normalization,
) -> Result<Vec<TrackletPrediction>> {
    let mut opts = options.clone();
    opts.use_person_boxes = true;
    let mut usable = tracklets.clone();
    usable.records.retain(|r| {
        let frames = r.person_boxes.range(..r.frame_count).count();
        if frames == 0 {
            warn!("tracklet {}: no person box within its {} frames; skipped", r.id, r.frame_count);
        }
        frames > 0
    });
    let data = ClipDataset::new(&usable, base_dir, opts, norm);
    (0..data.len())
        .map(|i| {
            let record = &data.records[i];
            let sample = data.sample(i, 0)?;
            let p = model.predict_sample(&sample)?;
            Ok(TrackletPrediction {
                id: record.id.clone(),
                path: record.path.clone(),
                frames: record.person_boxes.range(..record.frame_count).count(),
                class: p.class,
                distribution: p.distribution,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BBox;
    use crate::model::Prediction;
    use crate::preprocessing::{Sample, SamplingConfig, SamplingMode};
    use crate::synthetic::{synthetic_manifest, SynthDatasetConfig};

    /// Logits from simple clip statistics, so different crops differ.
    struct Stats;

    impl Classifier for Stats {
        fn predict_sample(&self, s: &Sample) -> Result<Prediction> {
            let f = &s.clip.frames;
            let mean = f.mean().unwrap() as f64;
            let top = f.slice(ndarray::s![.., ..f.dim().1 / 2, .., ..]).mean().unwrap() as f64;
            let present = if s.face.present { 1.0 } else { 0.0 };
            Ok(Prediction::from_logits(&[mean, top, present, mean * top]))
        }
    }

    fn options() -> SampleOptions {
        SampleOptions::new(SamplingConfig::desk().with_mode(SamplingMode::CenterStart))
    }

    #[test]
    fn full_frame_tracklet_matches_standard_inference() {
        let m = synthetic_manifest(&SynthDatasetConfig {
            per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let mut tracks = m.clone();
        for r in &mut tracks.records {
            r.person_boxes = (0..r.frame_count).map(|t| (t, BBox::new(0.0, 0.0, 64.0, 64.0))).collect();
        }
        let preds = infer_tracklets(&Stats, &tracks, None, &options(), Normalization::default()).unwrap();
        let data = ClipDataset::new(&m, None, options(), Normalization::default());
        for (i, p) in preds.iter().enumerate() {
            let standard = Stats.predict_sample(&data.sample(i, 0).unwrap()).unwrap();
            assert_eq!(p.distribution, standard.distribution);
            assert_eq!(p.id, m.records[i].id);
        }
    }

    #[test]
    fn disjoint_tracklets_predicted_separately_and_empty_skipped() {
        let m = synthetic_manifest(&SynthDatasetConfig {
            per_class: 1,
            with_person_boxes: true,
            ..Default::default()
        })
        .unwrap();
        let base = m.records[0].clone();
        let mut left = base.clone();
        left.id = "left".into();
        left.person_boxes = (0..20).map(|t| (t, BBox::new(0.0, 0.0, 32.0, 64.0))).collect();
        let mut right = base.clone();
        right.id = "right".into();
        right.person_boxes = (20..40).map(|t| (t, BBox::new(32.0, 0.0, 64.0, 64.0))).collect();
        let mut empty = base.clone();
        empty.id = "empty".into();
        empty.person_boxes.clear();
        let tracks = DatasetManifest::new(vec![left, empty, right]).unwrap();
        let preds = infer_tracklets(&Stats, &tracks, None, &options(), Normalization::default()).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!((preds[0].id.as_str(), preds[1].id.as_str()), ("left", "right"));
        assert_eq!(preds[0].frames, 20);
        assert_ne!(preds[0].distribution, preds[1].distribution);
    }

    #[test]
    fn labels_are_optional() {
        let text = concat!(
            r#"{"id":"t1","path":"synth:class=0,seed=1,frames=12,width=32,height=32","frame_count":12,"fps":25,"person_boxes":{"0":[0,0,16,32],"1":[1,0,17,32]}}"#,
            "\n",
            r#"{"id":"t2","path":"synth:class=2,seed=1,frames=12,width=32,height=32","label":"elderly","frame_count":12,"fps":25}"#,
            "\n"
        );
        let m = load_tracklet_manifest(text.as_bytes(), "tracks").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].label, AgeClass::Elderly);
        let preds = infer_tracklets(&Stats, &m, None, &options(), Normalization::default()).unwrap();
        assert_eq!(preds.len(), 1);
        assert!(load_tracklet_manifest("{bad".as_bytes(), "tracks").is_err());
    }
}
