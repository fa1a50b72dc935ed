//! Aligned face-crop dataset drawn from video records: ten frames at stride
//! 4 per video, each aligned by its eye landmarks.

use std::path::Path;

use log::warn;

use super::align::align_face_crop;
use super::decode::open_source;
use super::sample::nearest_face;
use super::sampling::{sample_frame_indices, SamplingConfig, SamplingMode};
use super::FaceInput;
use crate::datamodel::{AgeClass, DatasetManifest};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FaceCrop {
    pub record_id: String,
    pub frame: usize,
    pub face: FaceInput,
    pub label: AgeClass,
}

/// Face crops of every record. A sampled frame without an annotation within
/// the search radius contributes nothing; several sampled frames sharing the
/// same nearest annotation contribute it once.
pub fn build_face_crops(manifest: &DatasetManifest, base: Option<&Path>, sampling: &SamplingConfig) -> Result<Vec<FaceCrop>> {
    let sampling = sampling.with_mode(SamplingMode::CenterStart);
    let mut out = Vec::new();
    for record in &manifest.records {
        if !record.has_faces() {
            continue;
        }
        let source = open_source(&record.path, base)?;
        let n = source.num_frames();
        if n == 0 {
            continue;
        }
        let mut used = Vec::new();
        for idx in sample_frame_indices(n, &sampling, 0) {
            let Some((f, ann)) = nearest_face(record, idx) else { continue };
            if used.contains(&f) {
                continue;
            }
            used.push(f);
            let frame = source.frame(f)?;
            let size = sampling.face_size;
            match align_face_crop(&frame, &ann.bbox, ann.eyes, (size, size)) {
                Ok(face) => out.push(FaceCrop {
                    record_id: record.id.clone(),
                    frame: f,
                    face,
                    label: record.label,
                }),
                Err(Error::Alignment(msg)) => warn!("{} frame {f}: {msg}; skipped", record.id),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_manifest, SynthDatasetConfig};

    #[test]
    fn crops_come_from_annotated_frames() {
        let manifest = synthetic_manifest(&SynthDatasetConfig {
            per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let crops = build_face_crops(&manifest, None, &SamplingConfig::face_dataset()).unwrap();
        assert!(!crops.is_empty());
        for c in &crops {
            let rec = manifest.records.iter().find(|r| r.id == c.record_id).unwrap();
            assert!(rec.face_boxes.contains_key(&c.frame));
            assert_eq!(c.label, rec.label);
            assert!(c.face.present);
            assert_eq!(c.face.size(), (288, 288));
        }
        let per_record = crops.iter().filter(|c| c.record_id == crops[0].record_id).count();
        assert!(per_record <= 10);
    }
}
