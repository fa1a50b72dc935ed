//! Evaluation under one changed input parameter: frame resolution or
//! sampling stride.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::model::Classifier;
use crate::preprocessing::ClipDataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Frames shrunk to `setting` pixels high (width in proportion) and
    /// resized back to the clip size.
    Resolution,
    /// Frames sampled `setting` apart.
    Stride,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Resolution => "resolution",
            SweepAxis::Stride => "stride",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resolution" => Ok(SweepAxis::Resolution),
            "stride" => Ok(SweepAxis::Stride),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis {other:?} (expected resolution or stride)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub setting: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// Settings must be non-empty and strictly increasing or strictly
/// decreasing.
fn check_settings(settings: &[usize]) -> Result<()> {
    if settings.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one setting".into()));
    }
    let up = settings.windows(2).all(|w| w[0] < w[1]);
    let down = settings.windows(2).all(|w| w[0] > w[1]);
    if !(up || down) {
        return Err(Error::InvalidArgument(format!(
            "sweep settings {settings:?} are not strictly ordered"
        )));
    }
    Ok(())
}

/// Copy of `data` whose samples differ only in the swept parameter.
fn dataset_at(data: &ClipDataset, axis: SweepAxis, setting: usize) -> Result<ClipDataset> {
    let mut opts = data.options.clone();
    let (h, w) = (opts.sampling.clip_height, opts.sampling.clip_width);
    match axis {
        SweepAxis::Resolution => {
            if !(1..=h).contains(&setting) {
                return Err(Error::InvalidArgument(format!(
                    "resolution {setting} outside 1..={h} (clip height)"
                )));
            }
            let lw = ((setting * w) as f64 / h as f64).round().max(1.0) as usize;
            opts.low_res = (setting != h).then_some((setting, lw.min(w)));
        }
        SweepAxis::Stride => {
            if setting == 0 {
                return Err(Error::InvalidArgument("stride must be >= 1".into()));
            }
            opts.sampling = opts.sampling.with_stride(setting);
        }
    }
    Ok(data.with_options(opts))
}

/// Evaluates `model` on `data` once per setting, in the given order.
pub fn robustness_sweep(model: &dyn Classifier, data: &ClipDataset, axis: SweepAxis, settings: &[usize]) -> Result<SweepReport> {
    check_settings(settings)?;
    let points = settings
        .iter()
        .map(|&setting| {
            let view = dataset_at(data, axis, setting)?;
            let report = evaluate(model, &view)?.report;
            log::info!("{axis} {setting}: accuracy {:.4}", report.accuracy);
            Ok(SweepPoint { setting, report })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport { axis, points })
}
