//! Metrics, attention rollout, robustness sweeps and tracklet inference.

pub mod metrics;
pub mod rollout;
pub mod sweep;
pub mod tracklets;

use serde::{Deserialize, Serialize};

use crate::datamodel::AgeClass;
use crate::model::{Classifier, Prediction};
use crate::preprocessing::ClipDataset;
use crate::{Error, Result};

pub use metrics::{compute_metrics, ClassScores, MetricsReport};
pub use rollout::{attention_rollout, RolloutMap};
pub use sweep::{robustness_sweep, SweepAxis, SweepPoint, SweepReport};
pub use tracklets::{infer_tracklets, load_tracklet_manifest, load_tracklet_manifest_file, TrackletPrediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub predictions: Vec<Prediction>,
    pub labels: Vec<AgeClass>,
    pub report: MetricsReport,
}

/// Predicts every sample of `data` in manifest order and scores the result.
pub fn evaluate(model: &dyn Classifier, data: &ClipDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut predictions = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let sample = data.sample(i, 0)?;
        predictions.push(model.predict_sample(&sample)?);
    }
    let labels = data.labels();
    let classes: Vec<AgeClass> = predictions.iter().map(|p| p.class).collect();
    let report = compute_metrics(&classes, &labels)?;
    Ok(Evaluation {
        ids: data.records.iter().map(|r| r.id.clone()).collect(),
        predictions,
        labels,
        report,
    })
}
