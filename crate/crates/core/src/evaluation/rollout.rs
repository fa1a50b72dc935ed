//! Attention rollout: how much each input patch contributes to the class
//! token after the last block.
//!
//! Every attention sublayer becomes a token-to-token matrix (heads averaged,
//! identity added for the residual path, rows renormalized). The MLP sublayer
//! acts per token and contributes the identity. The class-token row of the
//! product over all sublayers is split by frame through the t-major token
//! order.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::model::AgeFormer;
use crate::nn::{AttentionLayout, AttentionProbs, Scalar};
use crate::preprocessing::{FaceInput, VideoClip};
use crate::video_backbone::{AttentionRecord, VideoBackboneConfig};
use crate::{Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"AGEROLL1";

/// A row-stochastic token-to-token matrix stored by rows, each row a list of
/// `(column, weight)` sorted by column.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    /// `normalize(mean_h(A_h) + I)` of one attention sublayer.
    pub fn from_attention<S: Scalar>(layout: &AttentionLayout, probs: &AttentionProbs<S>) -> Result<Self> {
        let n = layout.query_rows();
        if probs.len() != layout.groups.len() * layout.heads {
            return Err(Error::Shape(format!(
                "{} attention maps for {} groups x {} heads",
                probs.len(),
                layout.groups.len(),
                layout.heads
            )));
        }
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|r| vec![(r, 1.0)]).collect();
        let head_mean = 1.0 / layout.heads as f64;
        for (g, group) in layout.groups.iter().enumerate() {
            for h in 0..layout.heads {
                let p = &probs[layout.slot(g, h)];
                if p.dim() != (group.queries.len(), group.keys.len()) {
                    return Err(Error::Shape(format!(
                        "attention map {:?} for group of {} queries and {} keys",
                        p.dim(),
                        group.queries.len(),
                        group.keys.len()
                    )));
                }
                for (i, &r) in group.queries.iter().enumerate() {
                    let w = layout.row_weight[r] * head_mean;
                    rows[r].extend(group.keys.iter().zip(p.row(i)).map(|(&c, &v)| (c, w * v.as_f64())));
                }
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            row.dedup_by(|later, earlier| {
                if later.0 == earlier.0 {
                    earlier.1 += later.1;
                    true
                } else {
                    false
                }
            });
            let sum: f64 = row.iter().map(|&(_, v)| v).sum();
            row.iter_mut().for_each(|e| e.1 /= sum);
        }
        Ok(SparseRows { rows })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(_, v)| v).sum()).collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.rows.len();
        let mut out = Array2::zeros((n, n));
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// `x^T M`.
    pub fn left_multiply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len()];
        for (row, &xr) in self.rows.iter().zip(x) {
            if xr != 0.0 {
                for &(c, v) in row {
                    out[c] += xr * v;
                }
            }
        }
        out
    }
}

/// Normalized sublayer matrices in forward order: temporal then spatial for
/// every block.
pub fn sublayer_matrices<S: Scalar>(record: &AttentionRecord<S>) -> Result<Vec<SparseRows>> {
    let mut out = Vec::with_capacity(2 * record.layers.len());
    for layer in &record.layers {
        out.push(SparseRows::from_attention(&record.temporal_layout, &layer.temporal)?);
        out.push(SparseRows::from_attention(&record.spatial_layout, &layer.spatial)?);
    }
    Ok(out)
}

/// Class-token row of the rollout product, over all tokens.
pub fn class_token_rollout<S: Scalar>(record: &AttentionRecord<S>) -> Result<Vec<f64>> {
    if record.layers.is_empty() {
        return Err(Error::MissingAttention);
    }
    let mats = sublayer_matrices(record)?;
    let mut row = vec![0.0; mats[0].rows.len()];
    row[0] = 1.0;
    // e0^T M_L ... M_1, applied from the last sublayer back to the first.
    for m in mats.iter().rev() {
        row = m.left_multiply(&row);
    }
    Ok(row)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    /// Rollout mass of every patch, `T x N`, before upsampling.
    pub patch_scores: Array2<f64>,
    /// One `H x W` heatmap per frame, each scaled to maximum 1 (all zero when
    /// the frame has no mass).
    pub frames: Vec<Array2<f32>>,
}

impl RolloutMap {
    pub fn from_record<S: Scalar>(record: Option<&AttentionRecord<S>>, cfg: &VideoBackboneConfig) -> Result<Self> {
        let record = record.ok_or(Error::MissingAttention)?;
        let row = class_token_rollout(record)?;
        if row.len() != cfg.num_tokens() {
            return Err(Error::Shape(format!(
                "attention over {} tokens, config expects {}",
                row.len(),
                cfg.num_tokens()
            )));
        }
        let n = cfg.num_patches();
        let (_, gw) = cfg.grid();
        let patch = cfg.patch_size;
        let patch_scores = Array2::from_shape_fn((cfg.frames, n), |(t, p)| row[cfg.token_row(t, p)]);
        let frames = patch_scores
            .outer_iter()
            .map(|scores| {
                let max = scores.iter().cloned().fold(0.0f64, f64::max);
                let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
                Array2::from_shape_fn((cfg.height, cfg.width), |(y, x)| {
                    (scores[(y / patch) * gw + x / patch] * scale) as f32
                })
            })
            .collect();
        Ok(RolloutMap { patch_scores, frames })
    }

    /// Writes `frame_NNN.png` (8-bit grayscale) per frame and `rollout.raw`:
    /// magic, `u32` frames, height, width, then little-endian `f32` values in
    /// frame, row, column order. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (t, map) in self.frames.iter().enumerate() {
            let (h, w) = map.dim();
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
            });
            let path = dir.join(format!("frame_{t:03}.png"));
            img.save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::new(std::io::ErrorKind::Other, e)))?;
            paths.push(path);
        }
        let path = dir.join("rollout.raw");
        let (h, w) = self.frames.first().map(|m| m.dim()).unwrap_or((0, 0));
        let mut bytes = Vec::with_capacity(20 + 4 * self.frames.len() * h * w);
        bytes.extend_from_slice(RAW_MAGIC);
        for v in [self.frames.len(), h, w] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for map in &self.frames {
            for v in map.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
        Ok(paths)
    }

    /// Reads the raw file written by [`Self::write`].
    pub fn read_raw(path: &Path) -> Result<Vec<Array2<f32>>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Decode(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != RAW_MAGIC {
            return Err(bad("not a rollout file"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (t, h, w) = (dim(0), dim(1), dim(2));
        if bytes.len() != 20 + 4 * t * h * w {
            return Err(bad("length does not match header"));
        }
        let values: Vec<f32> = bytes[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(values
            .chunks_exact(h * w)
            .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("sized chunk"))
            .collect())
    }
}

/// Runs the model on `clip` and rolls out its video attention.
pub fn attention_rollout(model: &AgeFormer, clip: &VideoClip, face: &FaceInput) -> Result<RolloutMap> {
    let (_, record) = model.predict_with_attention(clip, face)?;
    RolloutMap::from_record(Some(&record), &model.config().video)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};

    fn tiny(frames: usize, height: usize, width: usize, depth: usize, heads: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.video = VideoBackboneConfig {
            patch_size: 4,
            embed_dim: 8,
            depth,
            heads,
            frames,
            height,
            width,
            mlp_ratio: 2,
        };
        cfg
    }

    fn record(cfg: &ModelConfig, seed: u64) -> (AgeFormer, AttentionRecord<f32>) {
        let model = AgeFormer::new(cfg, seed).unwrap();
        let v = &cfg.video;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let frames = ndarray::Array4::from_shape_simple_fn((v.frames, v.height, v.width, 3), || rng.gen::<f32>() * 4.0 - 2.0);
        let clip = VideoClip::new(frames, (0..v.frames).collect());
        let face = FaceInput::absent(cfg.face.input_size);
        let (_, rec) = model.predict_with_attention(&clip, &face).unwrap();
        (model, rec)
    }

    #[test]
    fn uniform_attention_gives_uniform_heatmap() {
        let cfg = tiny(3, 8, 12, 2, 2);
        let (_, mut rec) = record(&cfg, 1);
        for layer in &mut rec.layers {
            for p in layer.temporal.iter_mut().chain(layer.spatial.iter_mut()) {
                let k = p.ncols() as f32;
                p.fill(1.0 / k);
            }
        }
        let map = RolloutMap::from_record(Some(&rec), &cfg.video).unwrap();
        let first = map.patch_scores[[0, 0]];
        assert!(map.patch_scores.iter().all(|&s| (s - first).abs() < 1e-12));
        for f in &map.frames {
            assert!(f.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn sublayer_matrices_are_row_stochastic() {
        let cfg = tiny(4, 8, 8, 3, 2);
        let (_, rec) = record(&cfg, 2);
        for m in sublayer_matrices(&rec).unwrap() {
            for s in m.row_sums() {
                assert!((s - 1.0).abs() < 1e-6, "{s}");
            }
            assert!(m.rows.iter().flatten().all(|&(_, v)| v >= 0.0));
        }
    }

    /// One frame of two patches, one block, one head: tokens are the class
    /// token and patches 1, 2.
    #[test]
    fn single_block_matches_hand_calculation() {
        let cfg = tiny(1, 4, 8, 1, 1);
        let (_, rec) = record(&cfg, 3);
        let layer = &rec.layers[0];
        // Temporal: patch p attends to [cls, p].
        let t = |p: usize| (layer.temporal[p][[0, 0]] as f64, layer.temporal[p][[0, 1]] as f64);
        let s = &layer.spatial[0];
        let s = |i: usize, j: usize| s[[i, j]] as f64;
        // Identity added, rows renormalized by their sum (2 up to f32 round-off).
        let (c1, self1) = t(0);
        let (c2, self2) = t(1);
        let (n1, n2) = (c1 + self1 + 1.0, c2 + self2 + 1.0);
        let temporal = [
            [1.0, 0.0, 0.0],
            [c1 / n1, (self1 + 1.0) / n1, 0.0],
            [c2 / n2, 0.0, (self2 + 1.0) / n2],
        ];
        let n0 = s(0, 0) + s(0, 1) + s(0, 2) + 1.0;
        let cls_spatial = [(s(0, 0) + 1.0) / n0, s(0, 1) / n0, s(0, 2) / n0];
        let expected: Vec<f64> = (0..3).map(|j| (0..3).map(|k| cls_spatial[k] * temporal[k][j]).sum()).collect();
        let got = class_token_rollout(&rec).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
        let map = RolloutMap::from_record(Some(&rec), &cfg.video).unwrap();
        let max = expected[1].max(expected[2]);
        assert!((map.frames[0][[0, 0]] as f64 - expected[1] / max).abs() < 1e-6);
        assert!((map.frames[0][[3, 7]] as f64 - expected[2] / max).abs() < 1e-6);
    }

    #[test]
    fn heatmaps_nonnegative_with_unit_max() {
        let cfg = tiny(2, 8, 8, 2, 2);
        let (model, _) = record(&cfg, 4);
        let v = &cfg.video;
        let clip = VideoClip::new(ndarray::Array4::from_elem((v.frames, v.height, v.width, 3), 0.3), vec![0, 1]);
        let map = attention_rollout(&model, &clip, &FaceInput::absent(cfg.face.input_size)).unwrap();
        assert_eq!(map.frames.len(), 2);
        for f in &map.frames {
            assert_eq!(f.dim(), (8, 8));
            assert!(f.iter().all(|&v| v >= 0.0));
            assert!((f.iter().cloned().fold(0.0, f32::max) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_record_is_an_error() {
        let cfg = tiny(1, 4, 8, 1, 1);
        assert!(matches!(
            RolloutMap::from_record::<f32>(None, &cfg.video),
            Err(Error::MissingAttention)
        ));
        let (_, mut rec) = record(&cfg, 5);
        rec.layers.clear();
        assert!(matches!(class_token_rollout(&rec), Err(Error::MissingAttention)));
    }

    #[test]
    fn export_round_trips() {
        let cfg = tiny(2, 8, 8, 1, 1);
        let (_, rec) = record(&cfg, 6);
        let map = RolloutMap::from_record(Some(&rec), &cfg.video).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = map.write(dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let back = RolloutMap::read_raw(&dir.path().join("rollout.raw")).unwrap();
        assert_eq!(back, map.frames);
        let png = image::open(&paths[0]).unwrap().to_luma8();
        assert_eq!(png.dimensions(), (8, 8));
    }
}
