//! Indexed access to prepared samples of a manifest.

use std::path::{Path, PathBuf};

use log::debug;
use sha2::{Digest, Sha256};

use super::cache::{read_clip_cache, write_clip_cache};
use super::decode::open_source;
use super::sample::{build_raw_sample, Normalization, RawSample, Sample, SampleOptions};
use crate::datamodel::{AgeClass, DatasetManifest, VideoRecord};
use crate::Result;

#[derive(Clone, Debug)]
pub struct ClipDataset {
    pub records: Vec<VideoRecord>,
    /// Directory relative paths in the manifest are resolved against.
    pub base_dir: Option<PathBuf>,
    pub options: SampleOptions,
    pub norm: Normalization,
    cache_dir: Option<PathBuf>,
}

impl ClipDataset {
    pub fn new(manifest: &DatasetManifest, base_dir: Option<PathBuf>, options: SampleOptions, norm: Normalization) -> Self {
        ClipDataset {
            records: manifest.records.clone(),
            base_dir,
            options,
            norm,
            cache_dir: None,
        }
    }

    /// Prepared clips are looked up in (and [`Self::write_cache`] writes to)
    /// `dir`. Cache entries are keyed by record id and the sample options.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_options(&self, options: SampleOptions) -> Self {
        ClipDataset {
            options,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label(&self, i: usize) -> AgeClass {
        self.records[i].label
    }

    pub fn labels(&self) -> Vec<AgeClass> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// File name of the cache entry of `record` under the current options.
    pub fn cache_name(&self, record: &VideoRecord) -> String {
        let opts = serde_json::to_vec(&self.options).expect("options serialize");
        let digest = Sha256::new().chain_update(record.id.as_bytes()).chain_update([0u8]).chain_update(&opts).finalize();
        let tag: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let safe: String = record
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}-{tag}.agc")
    }

    fn cache_path(&self, record: &VideoRecord) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(self.cache_name(record)))
    }

    /// Un-normalized sample `i`. Only deterministic (centre-start) sampling
    /// reads the cache; `seed` drives random-start sampling.
    pub fn raw(&self, i: usize, seed: u64) -> Result<RawSample> {
        let record = &self.records[i];
        let cacheable = self.options.sampling.mode == super::SamplingMode::CenterStart;
        if cacheable {
            if let Some(path) = self.cache_path(record).filter(|p| p.exists()) {
                debug!("{}: reading {}", record.id, path.display());
                return read_clip_cache(&path);
            }
        }
        let source = open_source(&record.path, self.base_dir.as_deref())?;
        build_raw_sample(record, source.as_ref(), &self.options, seed)
    }

    pub fn sample(&self, i: usize, seed: u64) -> Result<Sample> {
        Ok(self.raw(i, seed)?.normalize(&self.norm))
    }

    /// Prepares record `i` and stores it in the cache directory.
    pub fn write_cache(&self, i: usize, dir: &Path) -> Result<PathBuf> {
        let record = &self.records[i];
        let source = open_source(&record.path, self.base_dir.as_deref())?;
        let raw = build_raw_sample(record, source.as_ref(), &self.options, 0)?;
        let path = dir.join(self.cache_name(record));
        write_clip_cache(&path, &raw)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocessing::{SamplingConfig, SamplingMode};
    use crate::synthetic::{synthetic_manifest, SynthDatasetConfig};

    fn dataset(mode: SamplingMode) -> ClipDataset {
        let manifest = synthetic_manifest(&SynthDatasetConfig {
            per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let opts = SampleOptions::new(SamplingConfig::desk().with_mode(mode));
        ClipDataset::new(&manifest, None, opts, Normalization::default())
    }

    #[test]
    fn cache_reproduces_fresh_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(SamplingMode::CenterStart).with_cache_dir(dir.path());
        let fresh = ds.raw(2, 0).unwrap();
        ds.write_cache(2, dir.path()).unwrap();
        let cached = ds.raw(2, 0).unwrap();
        assert_eq!(fresh, cached);
    }

    #[test]
    fn cache_key_depends_on_options() {
        let ds = dataset(SamplingMode::CenterStart);
        let other = ds.with_options(SampleOptions::new(SamplingConfig::desk().with_mode(SamplingMode::CenterStart).with_stride(2)));
        assert_ne!(ds.cache_name(&ds.records[0]), other.cache_name(&other.records[0]));
    }

    #[test]
    fn random_start_depends_on_seed() {
        let ds = dataset(SamplingMode::RandomStart);
        let a = ds.raw(0, 1).unwrap();
        let b = ds.raw(0, 1).unwrap();
        assert_eq!(a, b);
        let differs = (2..10).any(|s| ds.raw(0, s).unwrap().clip.source_indices != a.clip.source_indices);
        assert!(differs);
    }
}
