//! Main stream: frame-level patch tokens and divided space-time attention.
//!
//! Token layout: row 0 is the class token, and patch `p` (raster order over
//! the `H/P x W/P` grid) of frame `t` is row `1 + t * N + p`. A patch vector
//! flattens its `P x P x 3` pixels in `(dy, dx, channel)` order.
//!
//! Each block runs three pre-normalized residual sublayers:
//! * temporal: for every patch location `p`, the `T` copies of `p` attend over
//!   themselves plus the class token; the class token itself is not updated
//!   here;
//! * spatial: for every frame `t`, the class token and the `N` patches of `t`
//!   attend among themselves; the class-token update is the mean over frames;
//! * a two-layer GELU MLP.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{AttentionGroup, AttentionLayout, AttentionProbs, Eager, Exec, Init, ParamId, ParamKind, ParamStore, Scalar};
use crate::preprocessing::VideoClip;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoBackboneConfig {
    #[serde(rename = "patch")]
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

impl VideoBackboneConfig {
    pub fn desk() -> Self {
        VideoBackboneConfig {
            patch_size: 16,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            frames: 8,
            height: 64,
            width: 64,
            mlp_ratio: 4,
        }
    }

    pub fn paper() -> Self {
        VideoBackboneConfig {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            frames: 32,
            height: 224,
            width: 224,
            mlp_ratio: 4,
        }
    }

    /// Violated constraints, each naming its field under `prefix`.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("patch", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                out.push(format!("{prefix}{k}: must be >= 1"));
            }
        }
        if out.is_empty() {
            for (k, v) in [("height", self.height), ("width", self.width)] {
                if v % self.patch_size != 0 {
                    out.push(format!(
                        "{prefix}patch: {k} {v} is not divisible by patch size {}",
                        self.patch_size
                    ));
                }
            }
            if self.embed_dim % self.heads != 0 {
                out.push(format!(
                    "{prefix}heads: embed_dim {} is not divisible by {} heads",
                    self.embed_dim, self.heads
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("model.");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    /// Patches per frame, `N`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// `3 P^2`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// `1 + N T`.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches() * self.frames
    }

    pub fn token_row(&self, t: usize, p: usize) -> usize {
        1 + t * self.num_patches() + p
    }
}

/// Pre-embedding patch vectors, `N T x 3 P^2`, in token order (no class row).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens<S = f32> {
    pub tokens: Array2<S>,
}

fn check_clip(clip: &VideoClip, cfg: &VideoBackboneConfig) -> Result<()> {
    let dim = clip.frames.dim();
    if dim != (cfg.frames, cfg.height, cfg.width, 3) {
        return Err(Error::Config(format!(
            "clip shape {dim:?} does not match the configured ({}, {}, {}, 3)",
            cfg.frames, cfg.height, cfg.width
        )));
    }
    Ok(())
}

pub fn patchify<S: Scalar>(clip: &VideoClip, cfg: &VideoBackboneConfig) -> Result<PatchTokens<S>> {
    check_clip(clip, cfg)?;
    let p = cfg.patch_size;
    let (_, gw) = cfg.grid();
    let n = cfg.num_patches();
    let mut tokens = Array2::<S>::zeros((n * cfg.frames, cfg.patch_dim()));
    for t in 0..cfg.frames {
        for pi in 0..n {
            let (py, px) = (pi / gw, pi % gw);
            let mut row = tokens.row_mut(t * n + pi);
            let mut j = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        row[j] = S::lit(clip.frames[[t, py * p + dy, px * p + dx, c]] as f64);
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(PatchTokens { tokens })
}

/// Inverse of [`patchify`]; source indices are `0..T`.
pub fn unpatchify(tokens: &PatchTokens<f32>, cfg: &VideoBackboneConfig) -> Result<VideoClip> {
    let n = cfg.num_patches();
    if tokens.tokens.dim() != (n * cfg.frames, cfg.patch_dim()) {
        return Err(Error::Config(format!(
            "token matrix {:?} does not match {} x {}",
            tokens.tokens.dim(),
            n * cfg.frames,
            cfg.patch_dim()
        )));
    }
    let p = cfg.patch_size;
    let (_, gw) = cfg.grid();
    let mut frames = Array4::<f32>::zeros((cfg.frames, cfg.height, cfg.width, 3));
    for t in 0..cfg.frames {
        for pi in 0..n {
            let (py, px) = (pi / gw, pi % gw);
            let row = tokens.tokens.row(t * n + pi);
            let mut j = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        frames[[t, py * p + dy, px * p + dx, c]] = row[j];
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(VideoClip::new(frames, (0..cfg.frames).collect()))
}

/// Attention weights of one forward pass, with the layouts that index them.
#[derive(Clone, Debug)]
pub struct AttentionRecord<S = f32> {
    pub temporal_layout: Arc<AttentionLayout>,
    pub spatial_layout: Arc<AttentionLayout>,
    pub layers: Vec<LayerAttention<S>>,
}

#[derive(Clone, Debug)]
pub struct LayerAttention<S> {
    pub temporal: AttentionProbs<S>,
    pub spatial: AttentionProbs<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub norm: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub temporal: AttentionIds,
    pub spatial: AttentionIds,
    pub mlp_norm: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

pub(crate) fn add_linear<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut R,
) -> LinearIds {
    LinearIds {
        w: store.add(format!("{name}.w"), Init::trunc_normal(fan_in, fan_out, std, rng), ParamKind::Weight),
        b: store.add(format!("{name}.b"), Init::zeros(1, fan_out), ParamKind::Bias),
    }
}

pub(crate) fn add_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> NormIds {
    NormIds {
        gain: store.add(format!("{name}.g"), Init::ones(1, dim), ParamKind::Gain),
        shift: store.add(format!("{name}.b"), Init::zeros(1, dim), ParamKind::Bias),
    }
}

/// Parameter handles and attention layouts of a registered main stream.
#[derive(Clone, Debug)]
pub struct VideoBackbone {
    pub cfg: VideoBackboneConfig,
    pub patch_embed: LinearIds,
    pub cls: ParamId,
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
    pub temporal_layout: Arc<AttentionLayout>,
    pub spatial_layout: Arc<AttentionLayout>,
    spatial_pos_rows: Vec<usize>,
    temporal_pos_rows: Vec<usize>,
    patch_mask: Vec<f64>,
}

impl VideoBackbone {
    /// Adds freshly initialized parameters named `{prefix}.*` to `store`.
    pub fn register<S: Scalar, R: Rng>(
        cfg: &VideoBackboneConfig,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let patch_embed = add_linear(store, &format!("{prefix}.patch_embed"), cfg.patch_dim(), d, INIT_STD, rng);
        let cls = store.add(format!("{prefix}.cls"), Init::trunc_normal(1, d, INIT_STD, rng), ParamKind::Embedding);
        let pos_spatial = store.add(
            format!("{prefix}.pos_spatial"),
            Init::trunc_normal(n + 1, d, INIT_STD, rng),
            ParamKind::Embedding,
        );
        let pos_temporal = store.add(
            format!("{prefix}.pos_temporal"),
            Init::trunc_normal(cfg.frames, d, INIT_STD, rng),
            ParamKind::Embedding,
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let base = format!("{prefix}.blocks.{l}");
            let mut attn = |kind: &str, store: &mut ParamStore<S>| AttentionIds {
                norm: add_norm(store, &format!("{base}.{kind}.norm"), d),
                q: add_linear(store, &format!("{base}.{kind}.q"), d, d, INIT_STD, rng),
                k: add_linear(store, &format!("{base}.{kind}.k"), d, d, INIT_STD, rng),
                v: add_linear(store, &format!("{base}.{kind}.v"), d, d, INIT_STD, rng),
                o: add_linear(store, &format!("{base}.{kind}.o"), d, d, INIT_STD, rng),
            };
            let temporal = attn("temporal", store);
            let spatial = attn("spatial", store);
            let hidden = d * cfg.mlp_ratio;
            blocks.push(BlockIds {
                temporal,
                spatial,
                mlp_norm: add_norm(store, &format!("{base}.mlp.norm"), d),
                fc1: add_linear(store, &format!("{base}.mlp.fc1"), d, hidden, INIT_STD, rng),
                fc2: add_linear(store, &format!("{base}.mlp.fc2"), hidden, d, INIT_STD, rng),
            });
        }
        let norm = add_norm(store, &format!("{prefix}.norm"), d);
        Ok(Self::with_ids(cfg.clone(), patch_embed, cls, pos_spatial, pos_temporal, blocks, norm))
    }

    fn with_ids(
        cfg: VideoBackboneConfig,
        patch_embed: LinearIds,
        cls: ParamId,
        pos_spatial: ParamId,
        pos_temporal: ParamId,
        blocks: Vec<BlockIds>,
        norm: NormIds,
    ) -> Self {
        let (temporal_layout, spatial_layout) = layouts(&cfg);
        let n = cfg.num_patches();
        let spatial_pos_rows = (0..cfg.frames).flat_map(|_| (0..n).map(|p| p + 1)).collect();
        let temporal_pos_rows = (0..cfg.frames).flat_map(|t| std::iter::repeat(t).take(n)).collect();
        let mut patch_mask = vec![1.0; cfg.num_tokens()];
        patch_mask[0] = 0.0;
        VideoBackbone {
            cfg,
            patch_embed,
            cls,
            pos_spatial,
            pos_temporal,
            blocks,
            norm,
            temporal_layout: Arc::new(temporal_layout),
            spatial_layout: Arc::new(spatial_layout),
            spatial_pos_rows,
            temporal_pos_rows,
            patch_mask,
        }
    }

    /// Embedded tokens `(1 + N T) x D`: class token plus positional terms.
    pub fn embed<S: Scalar, E: Exec<S>>(&self, e: &mut E, patches: &PatchTokens<S>) -> E::T {
        let x = e.constant(patches.tokens.clone());
        let emb = e.linear(&x, self.patch_embed.w, Some(self.patch_embed.b));
        let sp = e.param(self.pos_spatial);
        let tp = e.param(self.pos_temporal);
        let sp_rows = e.gather_rows(&sp, &self.spatial_pos_rows);
        let tp_rows = e.gather_rows(&tp, &self.temporal_pos_rows);
        let patches = e.add(&emb, &sp_rows);
        let patches = e.add(&patches, &tp_rows);
        let cls = e.param(self.cls);
        let sp0 = e.gather_rows(&sp, &[0]);
        let cls = e.add(&cls, &sp0);
        e.concat_rows(&[&cls, &patches])
    }

    fn attend<S: Scalar, E: Exec<S>>(
        &self,
        e: &mut E,
        x: &E::T,
        ids: &AttentionIds,
        layout: &Arc<AttentionLayout>,
    ) -> (E::T, AttentionProbs<S>) {
        let h = e.layer_norm(x, ids.norm.gain, ids.norm.shift, LAYER_NORM_EPS);
        let q = e.linear(&h, ids.q.w, Some(ids.q.b));
        let k = e.linear(&h, ids.k.w, Some(ids.k.b));
        let v = e.linear(&h, ids.v.w, Some(ids.v.b));
        let (a, probs) = e.attention(&q, &k, &v, layout);
        (e.linear(&a, ids.o.w, Some(ids.o.b)), probs)
    }

    /// Temporal sublayer including its residual.
    pub fn temporal_sublayer<S: Scalar, E: Exec<S>>(&self, e: &mut E, x: &E::T, layer: usize) -> (E::T, AttentionProbs<S>) {
        let (o, probs) = self.attend(e, x, &self.blocks[layer].temporal, &self.temporal_layout);
        let mask: Vec<S> = self.patch_mask.iter().map(|&m| S::lit(m)).collect();
        let o = e.scale_rows(&o, &mask);
        (e.add(x, &o), probs)
    }

    /// Spatial sublayer including its residual.
    pub fn spatial_sublayer<S: Scalar, E: Exec<S>>(&self, e: &mut E, x: &E::T, layer: usize) -> (E::T, AttentionProbs<S>) {
        let (o, probs) = self.attend(e, x, &self.blocks[layer].spatial, &self.spatial_layout);
        (e.add(x, &o), probs)
    }

    pub fn mlp_sublayer<S: Scalar, E: Exec<S>>(&self, e: &mut E, x: &E::T, layer: usize) -> E::T {
        let b = &self.blocks[layer];
        let h = e.layer_norm(x, b.mlp_norm.gain, b.mlp_norm.shift, LAYER_NORM_EPS);
        let h = e.linear(&h, b.fc1.w, Some(b.fc1.b));
        let h = e.gelu(&h);
        let h = e.linear(&h, b.fc2.w, Some(b.fc2.b));
        e.add(x, &h)
    }

    pub fn block<S: Scalar, E: Exec<S>>(&self, e: &mut E, x: &E::T, layer: usize) -> (E::T, LayerAttention<S>) {
        let (x, temporal) = self.temporal_sublayer(e, x, layer);
        let (x, spatial) = self.spatial_sublayer(e, &x, layer);
        (self.mlp_sublayer(e, &x, layer), LayerAttention { temporal, spatial })
    }

    /// Final normalized token matrix and the attention record.
    pub fn encode<S: Scalar, E: Exec<S>>(&self, e: &mut E, patches: &PatchTokens<S>) -> (E::T, AttentionRecord<S>) {
        let mut x = self.embed(e, patches);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let (y, att) = self.block(e, &x, l);
            x = y;
            layers.push(att);
        }
        let x = e.layer_norm(&x, self.norm.gain, self.norm.shift, LAYER_NORM_EPS);
        let record = AttentionRecord {
            temporal_layout: Arc::clone(&self.temporal_layout),
            spatial_layout: Arc::clone(&self.spatial_layout),
            layers,
        };
        (x, record)
    }

    /// Clip feature (`1 x D`, the final class-token row) and attention record.
    pub fn forward<S: Scalar, E: Exec<S>>(&self, e: &mut E, patches: &PatchTokens<S>) -> (E::T, AttentionRecord<S>) {
        let (x, record) = self.encode(e, patches);
        (e.gather_rows(&x, &[0]), record)
    }

    /// Inference on one clip with the eager executor.
    pub fn infer(&self, store: &ParamStore<f32>, clip: &VideoClip) -> Result<(Array1<f32>, AttentionRecord<f32>)> {
        let patches = patchify::<f32>(clip, &self.cfg)?;
        let mut e = Eager::new(store);
        let (f, rec) = self.forward(&mut e, &patches);
        Ok((f.row(0).to_owned(), rec))
    }
}

/// `(temporal, spatial)` layouts for the token order above.
fn layouts(cfg: &VideoBackboneConfig) -> (AttentionLayout, AttentionLayout) {
    let n = cfg.num_patches();
    let t_count = cfg.frames;
    let rows = cfg.num_tokens();
    let temporal_groups = (0..n)
        .map(|p| {
            let queries: Vec<usize> = (0..t_count).map(|t| cfg.token_row(t, p)).collect();
            let keys = std::iter::once(0).chain(queries.iter().copied()).collect();
            AttentionGroup { queries, keys }
        })
        .collect();
    let mut temporal_weight = vec![1.0; rows];
    temporal_weight[0] = 0.0;
    let spatial_groups = (0..t_count)
        .map(|t| {
            let members: Vec<usize> = std::iter::once(0).chain((0..n).map(|p| cfg.token_row(t, p))).collect();
            AttentionGroup {
                queries: members.clone(),
                keys: members,
            }
        })
        .collect();
    let mut spatial_weight = vec![1.0; rows];
    spatial_weight[0] = 1.0 / t_count as f64;
    (
        AttentionLayout {
            groups: temporal_groups,
            row_weight: temporal_weight,
            heads: cfg.heads,
        },
        AttentionLayout {
            groups: spatial_groups,
            row_weight: spatial_weight,
            heads: cfg.heads,
        },
    )
}

/// Clip feature of one clip; see [`VideoBackbone::infer`].
pub fn video_forward(
    clip: &VideoClip,
    backbone: &VideoBackbone,
    store: &ParamStore<f32>,
) -> Result<(Array1<f32>, AttentionRecord<f32>)> {
    backbone.infer(store, clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VideoBackboneConfig {
        VideoBackboneConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            frames: 3,
            height: 8,
            width: 12,
            mlp_ratio: 2,
        }
    }

    fn random_clip(cfg: &VideoBackboneConfig, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array4::from_shape_simple_fn((cfg.frames, cfg.height, cfg.width, 3), || rng.gen::<f32>());
        VideoClip::new(frames, (0..cfg.frames).collect())
    }

    fn build(cfg: &VideoBackboneConfig, seed: u64) -> (ParamStore<f64>, VideoBackbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = VideoBackbone::register(cfg, &mut store, "video", &mut rng).unwrap();
        // Larger weights so mixing is visible numerically.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.kind(id) != ParamKind::Gain {
                store.get_mut(id).mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            }
        }
        (store, bb)
    }

    #[test]
    fn patch_geometry() {
        let p = VideoBackboneConfig::paper();
        assert_eq!(p.num_patches(), 196);
        assert_eq!(p.patch_dim(), 768);
        assert_eq!(p.num_tokens(), 1 + 196 * 32);
        let d = VideoBackboneConfig::desk();
        assert_eq!(d.num_patches(), 16);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn divisibility_is_validated() {
        let mut c = VideoBackboneConfig::paper();
        c.patch_size = 17;
        let probs = c.problems("model.");
        assert!(probs.iter().any(|m| m.starts_with("model.patch") && m.contains("224")));
        let mut c = VideoBackboneConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_round_trip_and_order() {
        let cfg = tiny();
        let clip = random_clip(&cfg, 1);
        let toks = patchify::<f32>(&clip, &cfg).unwrap();
        assert_eq!(toks.tokens.dim(), (cfg.frames * 6, 48));
        assert_eq!(unpatchify(&toks, &cfg).unwrap(), clip);
        // Frame 1, patch (row 1, col 2): pixel (dy 1, dx 2, c 0).
        let row = toks.tokens.row(1 * 6 + 1 * 3 + 2);
        assert_eq!(row[(1 * 4 + 2) * 3], clip.frames[[1, 4 + 1, 8 + 2, 0]]);
        let zero = VideoClip::new(Array4::zeros(clip.frames.raw_dim()), clip.source_indices.clone());
        assert!(patchify::<f32>(&zero, &cfg).unwrap().tokens.iter().all(|&v| v == 0.0));
        let mut wrong = cfg.clone();
        wrong.frames = 4;
        assert!(matches!(patchify::<f32>(&clip, &wrong), Err(Error::Config(_))));
    }

    #[test]
    fn block_preserves_shape_and_is_identity_at_zero_weights() {
        let cfg = tiny();
        let (mut store, bb) = build(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((cfg.num_tokens(), cfg.embed_dim), || rng.gen_range(-1.0..1.0));
        {
            let mut e = Eager::new(&store);
            let (y, _) = bb.block(&mut e, &x, 0);
            assert_eq!(y.dim(), x.dim());
            assert_ne!(y, x);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.starts_with("video.blocks.0.") && matches!(store.kind(id), ParamKind::Weight | ParamKind::Bias) {
                store.get_mut(id).fill(0.0);
            }
        }
        let mut e = Eager::new(&store);
        let (y, _) = bb.block(&mut e, &x, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny();
        let (store, bb) = build(&cfg, 4);
        let patches = patchify::<f64>(&random_clip(&cfg, 5), &cfg).unwrap();
        let mut e = Eager::new(&store);
        let (_, rec) = bb.forward(&mut e, &patches);
        assert_eq!(rec.layers.len(), cfg.depth);
        for layer in &rec.layers {
            assert_eq!(layer.temporal.len(), cfg.num_patches() * cfg.heads);
            assert_eq!(layer.spatial.len(), cfg.frames * cfg.heads);
            for p in layer.temporal.iter().chain(&layer.spatial) {
                for row in p.rows() {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let bb = VideoBackbone::register(&cfg, &mut store, "video", &mut rng).unwrap();
        let clip = random_clip(&cfg, 7);
        let (a, _) = bb.infer(&store, &clip).unwrap();
        let (b, _) = bb.infer(&store, &clip).unwrap();
        assert_eq!(a.len(), cfg.embed_dim);
        assert_eq!(a, b);
    }

    fn perm_tokens(x: &Array2<f64>, cfg: &VideoBackboneConfig, perm: &[usize]) -> Array2<f64> {
        let mut y = x.clone();
        for t in 0..cfg.frames {
            for (p, &q) in perm.iter().enumerate() {
                y.row_mut(cfg.token_row(t, p)).assign(&x.row(cfg.token_row(t, q)));
            }
        }
        y
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn temporal_sublayer_is_local(seed in 0u64..10_000, p in 0usize..6, q in 0usize..6, t in 0usize..3) {
            prop_assume!(p != q);
            let cfg = tiny();
            let (store, bb) = build(&cfg, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_simple_fn((cfg.num_tokens(), cfg.embed_dim), || rng.gen_range(-1.0..1.0));
            let mut x2 = x.clone();
            for v in x2.row_mut(cfg.token_row(t, q)).iter_mut() {
                *v += rng.gen_range(-2.0..2.0);
            }
            let mut e = Eager::new(&store);
            let (y1, _) = bb.temporal_sublayer(&mut e, &x, 0);
            let (y2, _) = bb.temporal_sublayer(&mut e, &x2, 0);
            for tt in 0..cfg.frames {
                let r = cfg.token_row(tt, p);
                for (a, b) in y1.row(r).iter().zip(y2.row(r).iter()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
            prop_assert_eq!(y1.row(0), y2.row(0));
        }

        #[test]
        fn spatial_permutation_equivariance(seed in 0u64..10_000) {
            let cfg = tiny();
            let (mut store, bb) = build(&cfg, 9);
            store.get_mut(bb.pos_spatial).fill(0.0);
            store.get_mut(bb.pos_temporal).fill(0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..cfg.num_patches()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let x = Array2::from_shape_simple_fn((cfg.num_tokens(), cfg.embed_dim), || rng.gen_range(-1.0..1.0));
            let xp = perm_tokens(&x, &cfg, &perm);
            let mut e = Eager::new(&store);
            let run = |e: &mut Eager<f64>, x: &Array2<f64>| {
                let (y, _) = bb.temporal_sublayer(e, x, 0);
                bb.spatial_sublayer(e, &y, 0).0
            };
            let y = run(&mut e, &x);
            let yp = run(&mut e, &xp);
            let expected = perm_tokens(&y, &cfg, &perm);
            for (a, b) in yp.iter().zip(expected.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_token_invariant_to_patch_permutation_end_to_end() {
        let cfg = tiny();
        let (mut store, bb) = build(&cfg, 10);
        store.get_mut(bb.pos_spatial).fill(0.0);
        store.get_mut(bb.pos_temporal).fill(0.0);
        let patches = patchify::<f64>(&random_clip(&cfg, 11), &cfg).unwrap();
        let n = cfg.num_patches();
        let perm = [3, 0, 5, 1, 4, 2];
        let mut permuted = patches.tokens.clone();
        for t in 0..cfg.frames {
            for (p, &q) in perm.iter().enumerate() {
                permuted.row_mut(t * n + p).assign(&patches.tokens.row(t * n + q));
            }
        }
        let mut e = Eager::new(&store);
        let (a, _) = bb.forward(&mut e, &patches);
        let (b, _) = bb.forward(&mut e, &PatchTokens { tokens: permuted });
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
