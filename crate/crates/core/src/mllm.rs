//! Dual-branch toy multimodal transformer.
//!
//! Text and understanding-image (`ImgU`) tokens run through the frozen `base/`
//! parameters. Generation-image (`ImgG`) tokens run through `gen/`, a
//! trainable copy of every per-layer projection, MLP and norm. All tokens
//! meet in one joint attention per layer, restricted by [`build_attention_mask`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::latent::{pool_grid, MaskPlane, PatchGrid};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BASE: &str = "base";
pub const GEN: &str = "gen";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    ImgU,
    ImgG,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Lays segments of the given modalities and lengths end to end.
pub fn tile_segments(parts: &[(Modality, usize)]) -> Vec<Segment> {
    let mut start = 0;
    parts
        .iter()
        .map(|&(modality, len)| {
            let s = Segment { modality, start, len };
            start += len;
            s
        })
        .collect()
}

/// Checks that segments are non-empty, ordered and contiguous from 0.
/// Returns the sequence length.
pub fn validate_segments(segments: &[Segment]) -> Result<usize> {
    if segments.is_empty() {
        return Err(Error::InvalidArgument("empty segment list".into()));
    }
    let mut next = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.len == 0 {
            return Err(Error::InvalidArgument(format!("segment {i} is empty")));
        }
        if s.start != next {
            return Err(Error::InvalidArgument(format!(
                "segment {i} starts at {} but previous ends at {next}",
                s.start
            )));
        }
        next = s.end();
    }
    Ok(next)
}

/// Per-position modality for a valid tiling.
pub fn position_modalities(segments: &[Segment]) -> Vec<Modality> {
    segments.iter().flat_map(|s| std::iter::repeat_n(s.modality, s.len)).collect()
}

/// Attention mask over a tiled sequence:
///
/// * a text query sees every non-`ImgG` key at or before its own position;
/// * an `ImgU` query sees every non-`ImgG` key of earlier segments and its
///   whole own segment;
/// * an `ImgG` query sees every key;
/// * no text or `ImgU` query ever sees an `ImgG` key.
pub fn build_attention_mask(segments: &[Segment]) -> Result<AttnMask> {
    let n = validate_segments(segments)?;
    let mut allowed = vec![false; n * n];
    let mut seg_of = vec![0usize; n];
    for (si, s) in segments.iter().enumerate() {
        seg_of[s.start..s.end()].fill(si);
    }
    let mods = position_modalities(segments);
    for q in 0..n {
        let row = &mut allowed[q * n..(q + 1) * n];
        match mods[q] {
            Modality::ImgG => row.fill(true),
            Modality::Text => {
                for k in 0..=q {
                    row[k] = mods[k] != Modality::ImgG;
                }
            }
            Modality::ImgU => {
                let own = &segments[seg_of[q]];
                for k in 0..own.start {
                    row[k] = mods[k] != Modality::ImgG;
                }
                row[own.start..own.end()].fill(true);
            }
        }
    }
    Ok(AttnMask { queries: n, keys: n, allowed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MllmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_text: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub mlp_ratio: usize,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self { dim: 16, layers: 4, heads: 2, vocab: 64, max_text: 24, grid_h: 8, grid_w: 8, mlp_ratio: 4 }
    }
}

/// How `ImgG` rows are routed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// `ImgG` rows use `gen/` weights.
    Branched,
    /// Every row uses `base/` weights (reference path for copy-equality checks).
    BaseOnly,
}

/// One branched pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BranchedBlock {
    pub layer: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Row bookkeeping for routing a sequence through two parameter sets.
struct RowSplit {
    base_rows: Vec<usize>,
    gen_rows: Vec<usize>,
    merge: Arc<Vec<Option<usize>>>,
}

impl RowSplit {
    fn new(mods: &[Modality], routing: Routing) -> Self {
        let is_gen = |m: Modality| routing == Routing::Branched && m == Modality::ImgG;
        let base_rows: Vec<usize> = (0..mods.len()).filter(|&i| !is_gen(mods[i])).collect();
        let gen_rows: Vec<usize> = (0..mods.len()).filter(|&i| is_gen(mods[i])).collect();
        let mut merge = vec![None; mods.len()];
        for (k, &r) in base_rows.iter().chain(&gen_rows).enumerate() {
            merge[r] = Some(k);
        }
        Self { base_rows, gen_rows, merge: Arc::new(merge) }
    }

    fn split(&self, g: &mut Graph, x: Var) -> Result<(Option<Var>, Option<Var>)> {
        if self.gen_rows.is_empty() {
            return Ok((Some(x), None));
        }
        if self.base_rows.is_empty() {
            return Ok((None, Some(x)));
        }
        Ok((Some(g.select_rows(x, &self.base_rows)?), Some(g.select_rows(x, &self.gen_rows)?)))
    }

    fn merge(&self, g: &mut Graph, base: Option<Var>, gen: Option<Var>) -> Result<Var> {
        match (base, gen) {
            (Some(b), None) | (None, Some(b)) => Ok(b),
            (Some(b), Some(gv)) => {
                let cat = g.concat_rows(&[b, gv])?;
                g.gather_rows(cat, self.merge.clone())
            }
            (None, None) => shape_err("merge of two empty branches"),
        }
    }
}

fn pname(ns: &str, layer: usize, leaf: &str) -> String {
    format!("{ns}/layers.{layer}.{leaf}")
}

impl BranchedBlock {
    /// Applies `f` with each active branch's namespace to its rows, then
    /// merges the results back into sequence order.
    fn per_branch(
        &self,
        g: &mut Graph,
        split: &RowSplit,
        x: Var,
        mut f: impl FnMut(&mut Graph, &str, Var) -> Result<Var>,
    ) -> Result<Var> {
        let (xb, xg) = split.split(g, x)?;
        let ob = xb.map(|v| f(g, BASE, v)).transpose()?;
        let og = xg.map(|v| f(g, GEN, v)).transpose()?;
        split.merge(g, ob, og)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[Segment],
        mask: &AttnMask,
        routing: Routing,
    ) -> Result<Var> {
        let n = validate_segments(segments)?;
        if g.value(x).shape() != (n, self.dim) {
            return shape_err(format!("block input {:?} for {n} tokens of width {}", g.value(x).shape(), self.dim));
        }
        if mask.queries != n || mask.keys != n {
            return shape_err(format!("mask {}x{} for sequence of {n}", mask.queries, mask.keys));
        }
        let split = RowSplit::new(&position_modalities(segments), routing);
        let l = self.layer;
        let d = self.dim;

        let qkv = self.per_branch(g, &split, x, |g, ns, v| {
            let n1 = g.param(store, &pname(ns, l, "norm1"))?;
            let h = g.rms_norm(v, Some(n1))?;
            let w = g.param(store, &pname(ns, l, "wqkv"))?;
            let b = g.param(store, &pname(ns, l, "bqkv"))?;
            g.linear(h, w, Some(b))
        })?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let attn = g.attention(q, k, v, self.heads, Some(mask))?;
        let o = self.per_branch(g, &split, attn, |g, ns, v| {
            let w = g.param(store, &pname(ns, l, "wo"))?;
            let b = g.param(store, &pname(ns, l, "bo"))?;
            g.linear(v, w, Some(b))
        })?;
        let x1 = g.add(x, o)?;
        let m = self.per_branch(g, &split, x1, |g, ns, v| {
            let n2 = g.param(store, &pname(ns, l, "norm2"))?;
            let h = g.rms_norm(v, Some(n2))?;
            let w1 = g.param(store, &pname(ns, l, "w1"))?;
            let b1 = g.param(store, &pname(ns, l, "b1"))?;
            let w2 = g.param(store, &pname(ns, l, "w2"))?;
            let b2 = g.param(store, &pname(ns, l, "b2"))?;
            let h = g.linear(h, w1, Some(b1))?;
            let h = g.gelu(h);
            g.linear(h, w2, Some(b2))
        })?;
        g.add(x1, m)
    }
}

/// One input segment's content.
#[derive(Clone, Debug)]
pub enum SegmentInput {
    Text(Vec<usize>),
    /// Understanding image: grid tokens `[cells, dim]`.
    ImgU(Var),
    /// Generation image: grid tokens `[cells, dim]`, already mask-substituted.
    ImgG(Var),
}

pub struct MllmOutput {
    pub segments: Vec<Segment>,
    pub hidden: Var,
    /// Logits for text positions in sequence order, `[text_tokens, vocab]`.
    pub text_logits: Option<Var>,
    /// Vision-head outputs for `ImgG` positions in sequence order.
    pub vision: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Mllm {
    pub cfg: MllmConfig,
}

impl Mllm {
    pub fn new(cfg: MllmConfig) -> Self {
        Self { cfg }
    }

    pub fn cells(&self) -> usize {
        self.cfg.grid_h * self.cfg.grid_w
    }

    /// Initializes embeddings, `base/` blocks and the text head. All frozen
    /// flags are `false`; callers freeze `base/` once pretraining is done.
    pub fn init_base<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let d = c.dim;
        let hid = c.mlp_ratio * d;
        let std = |fan: usize| (1.0 / fan as f64).sqrt();
        store.insert("base/tok_emb", Tensor::randn(c.vocab, d, 1.0, rng), false);
        store.insert("base/text_pos", Tensor::randn(c.max_text, d, 0.1, rng), false);
        store.insert("base/image_pos", Tensor::randn(self.cells(), d, 0.1, rng), false);
        for l in 0..c.layers {
            let mut put = |leaf: &str, t: Tensor| store.insert(pname(BASE, l, leaf), t, false);
            put("norm1", Tensor::full(1, d, 1.0));
            put("wqkv", Tensor::randn(d, 3 * d, std(d), rng));
            put("bqkv", Tensor::zeros(1, 3 * d));
            put("wo", Tensor::randn(d, d, std(d) / (2.0 * c.layers as f64).sqrt(), rng));
            put("bo", Tensor::zeros(1, d));
            put("norm2", Tensor::full(1, d, 1.0));
            put("w1", Tensor::randn(d, hid, std(d), rng));
            put("b1", Tensor::zeros(1, hid));
            put("w2", Tensor::randn(hid, d, std(hid) / (2.0 * c.layers as f64).sqrt(), rng));
            put("b2", Tensor::zeros(1, d));
        }
        store.insert("base/final_norm", Tensor::full(1, d, 1.0), false);
        store.insert("base/text_head.w", Tensor::randn(d, c.vocab, std(d), rng), false);
        store.insert("base/text_head.b", Tensor::zeros(1, c.vocab), false);
    }

    /// Copies every per-layer `base/` tensor and the final norm into `gen/`,
    /// draws a fresh vision head and zeroes the mask token.
    pub fn init_generation_branch<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.cfg.dim;
        let copies: Vec<(String, Tensor)> = store
            .names_with_prefix("base/layers.")
            .chain(std::iter::once("base/final_norm"))
            .map(|n| Ok((n.replacen(BASE, GEN, 1), store.get(n)?.clone())))
            .collect::<Result<_>>()?;
        if copies.len() != 10 * self.cfg.layers + 1 {
            return Err(Error::MissingParam("base/layers.*".into()));
        }
        for (name, t) in copies {
            store.insert(name, t, false);
        }
        store.insert("gen/vision_head.w", Tensor::randn(d, d, (1.0 / d as f64).sqrt(), rng), false);
        store.insert("gen/vision_head.b", Tensor::zeros(1, d), false);
        store.insert("gen/mask_token", Tensor::zeros(1, d), false);
        Ok(())
    }

    /// Text segment input: token embeddings plus absolute positions.
    fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.cfg.max_text {
            return Err(Error::InvalidArgument(format!(
                "text segment of {} tokens (max {})",
                ids.len(),
                self.cfg.max_text
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocab")));
        }
        let emb = g.param(store, "base/tok_emb")?;
        let pos = g.param(store, "base/text_pos")?;
        let e = g.select_rows(emb, ids)?;
        let p = g.slice_rows(pos, 0, ids.len())?;
        g.add(e, p)
    }

    fn embed_image(&self, g: &mut Graph, store: &ParamStore, grid: Var, modality: Modality) -> Result<Var> {
        let pos_name = if modality == Modality::ImgG && store.contains("gen/image_pos") {
            "gen/image_pos"
        } else {
            "base/image_pos"
        };
        let pos = g.param(store, pos_name)?;
        let want = (g.value(pos).rows(), self.cfg.dim);
        if g.value(grid).shape() != want {
            return shape_err(format!("image segment {:?}, expected {want:?}", g.value(grid).shape()));
        }
        g.add(grid, pos)
    }

    /// Gives `ImgG` segments their own `gh × gw` positional table, pooled
    /// from `base/image_pos`, for generation grids coarser than the
    /// understanding grid.
    pub fn init_generation_positions(&self, store: &mut ParamStore, gh: usize, gw: usize) -> Result<()> {
        let (h, w) = (self.cfg.grid_h, self.cfg.grid_w);
        if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 || h / gh != w / gw {
            return Err(Error::InvalidArgument(format!("{gh}x{gw} generation grid for a {h}x{w} base grid")));
        }
        let base = PatchGrid::new(h, w, store.get("base/image_pos")?.clone())?;
        let pooled = pool_grid(&base, h / gh)?;
        store.insert("gen/image_pos", pooled.into_tokens(), false);
        Ok(())
    }

    /// `ImgG` input tokens: `grid` with masked cells replaced by `gen/mask_token`.
    pub fn masked_grid_input(&self, g: &mut Graph, store: &ParamStore, grid: Var, mask: &MaskPlane) -> Result<Var> {
        let n = mask.masked.len();
        if g.value(grid).rows() != n {
            return shape_err(format!("mask plane of {n} cells for a grid of {}", g.value(grid).rows()));
        }
        let m = g.param(store, "gen/mask_token")?;
        let cat = g.concat_rows(&[grid, m])?;
        let idx: Vec<Option<usize>> =
            mask.masked.iter().enumerate().map(|(i, &masked)| Some(if masked { n } else { i })).collect();
        g.gather_rows(cat, Arc::new(idx))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[SegmentInput],
        routing: Routing,
    ) -> Result<MllmOutput> {
        let mut parts = Vec::with_capacity(inputs.len());
        let mut layout = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (v, m) = match input {
                SegmentInput::Text(ids) => (self.embed_text(g, store, ids)?, Modality::Text),
                SegmentInput::ImgU(grid) => (self.embed_image(g, store, *grid, Modality::ImgU)?, Modality::ImgU),
                SegmentInput::ImgG(grid) => (self.embed_image(g, store, *grid, Modality::ImgG)?, Modality::ImgG),
            };
            layout.push((m, g.value(v).rows()));
            parts.push(v);
        }
        let segments = tile_segments(&layout);
        let mask = build_attention_mask(&segments)?;
        let mut x = g.concat_rows(&parts)?;
        for layer in 0..self.cfg.layers {
            let block = BranchedBlock { layer, dim: self.cfg.dim, heads: self.cfg.heads };
            x = block.forward(g, store, x, &segments, &mask, routing)?;
        }
        let mods = position_modalities(&segments);
        let rows_of = |want: Modality| -> Vec<usize> { (0..mods.len()).filter(|&i| mods[i] == want).collect() };
        let text_rows = rows_of(Modality::Text);
        let img_g_rows = rows_of(Modality::ImgG);
        let text_logits = if text_rows.is_empty() {
            None
        } else {
            let h = g.select_rows(x, &text_rows)?;
            let n = g.param(store, "base/final_norm")?;
            let h = g.rms_norm(h, Some(n))?;
            Some(text_head(g, store, h)?)
        };
        let vision = if img_g_rows.is_empty() {
            None
        } else {
            let ns = if routing == Routing::Branched { GEN } else { BASE };
            let h = g.select_rows(x, &img_g_rows)?;
            let n = g.param(store, &format!("{ns}/final_norm"))?;
            let h = g.rms_norm(h, Some(n))?;
            Some(vision_head(g, store, h)?)
        };
        Ok(MllmOutput { segments, hidden: x, text_logits, vision })
    }

    /// Next-token cross-entropy on a caption that follows an understanding image.
    pub fn caption_loss(&self, g: &mut Graph, store: &ParamStore, image: Option<Var>, caption: &[usize]) -> Result<Var> {
        if caption.len() < 2 {
            return Err(Error::InvalidArgument("caption needs at least two tokens".into()));
        }
        let mut inputs = Vec::new();
        if let Some(img) = image {
            inputs.push(SegmentInput::ImgU(img));
        }
        inputs.push(SegmentInput::Text(caption.to_vec()));
        let out = self.forward(g, store, &inputs, Routing::Branched)?;
        let logits = out.text_logits.expect("text segment present");
        let preds = g.slice_rows(logits, 0, caption.len() - 1)?;
        g.cross_entropy(preds, &caption[1..])
    }
}

/// Linear text head `d → vocab`.
pub fn text_head(g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
    let w = g.param(store, "base/text_head.w")?;
    let b = g.param(store, "base/text_head.b")?;
    if g.value(hidden).cols() != g.value(w).rows() {
        return shape_err(format!("text head input width {}", g.value(hidden).cols()));
    }
    g.linear(hidden, w, Some(b))
}

/// Linear vision head `d → d`.
pub fn vision_head(g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
    let w = g.param(store, "gen/vision_head.w")?;
    let b = g.param(store, "gen/vision_head.b")?;
    if g.value(hidden).cols() != g.value(w).rows() {
        return shape_err(format!("vision head input width {}", g.value(hidden).cols()));
    }
    g.linear(hidden, w, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TrainFilter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(mask: &AttnMask) -> Vec<Vec<usize>> {
        (0..mask.queries).map(|q| (0..mask.keys).filter(|&k| mask.get(q, k)).collect()).collect()
    }

    #[test]
    fn six_token_mask_matches_hand_enumeration() {
        let segs = tile_segments(&[(Modality::Text, 2), (Modality::ImgU, 2), (Modality::ImgG, 2)]);
        let mask = build_attention_mask(&segs).unwrap();
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(rows(&mask), vec![vec![0], vec![0, 1], vec![0, 1, 2, 3], vec![0, 1, 2, 3], all.clone(), all]);
    }

    #[test]
    fn trivial_masks() {
        let m = build_attention_mask(&tile_segments(&[(Modality::Text, 1)])).unwrap();
        assert_eq!(m.allowed, vec![true]);
        let m = build_attention_mask(&tile_segments(&[(Modality::Text, 3)])).unwrap();
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.get(q, k), k <= q);
            }
        }
        assert!(build_attention_mask(&[]).is_err());
        let gap = [Segment { modality: Modality::Text, start: 1, len: 2 }];
        assert!(build_attention_mask(&gap).is_err());
    }

    fn toy_store(seed: u64) -> (Mllm, ParamStore) {
        let cfg = MllmConfig { dim: 8, layers: 2, heads: 2, vocab: 12, max_text: 6, grid_h: 2, grid_w: 2, mlp_ratio: 2 };
        let model = Mllm::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.init_base(&mut store, &mut rng);
        store.set_frozen_prefix("base/", true);
        model.init_generation_branch(&mut store, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn generation_branch_starts_as_exact_copy() {
        let (_, store) = toy_store(1);
        for name in store.names_with_prefix("base/layers.") {
            let copy = name.replacen("base", "gen", 1);
            assert!(store.get(name).unwrap().bit_eq(store.get(&copy).unwrap()), "{name}");
            assert!(!store.is_frozen(&copy).unwrap());
        }
    }

    #[test]
    fn routed_forward_at_init_equals_base_only_forward() {
        let (model, store) = toy_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::randn(4, 8, 1.0, &mut rng);
        let run = |routing| {
            let mut g = Graph::inference();
            let v = g.constant(grid.clone());
            let out = model
                .forward(&mut g, &store, &[SegmentInput::Text(vec![1, 4, 2]), SegmentInput::ImgG(v)], routing)
                .unwrap();
            (g.value(out.hidden).clone(), g.value(out.vision.unwrap()).clone())
        };
        let (h1, v1) = run(Routing::Branched);
        let (h2, v2) = run(Routing::BaseOnly);
        assert!(h1.bit_eq(&h2));
        assert!(v1.bit_eq(&v2));
    }

    #[test]
    fn no_imgg_rows_means_gen_branch_is_never_loaded() {
        let (model, mut store) = toy_store(4);
        store.remove_prefix("gen/");
        let mut g = Graph::inference();
        let img = g.constant(Tensor::zeros(4, 8));
        let out = model
            .forward(&mut g, &store, &[SegmentInput::ImgU(img), SegmentInput::Text(vec![0, 3])], Routing::Branched)
            .unwrap();
        assert!(out.vision.is_none());
        assert_eq!(g.value(out.text_logits.unwrap()).shape(), (2, 12));
    }

    #[test]
    fn last_block_base_output_and_mlp_are_unreached_by_imgg_loss() {
        let (model, mut store) = toy_store(5);
        // Track gradients for every tensor, frozen or not.
        store.set_frozen_prefix("", false);
        let mut g = Graph::new(TrainFilter::AllUnfrozen);
        let grid = g.constant(Tensor::randn(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
        let out = model
            .forward(&mut g, &store, &[SegmentInput::Text(vec![1, 2]), SegmentInput::ImgG(grid)], Routing::Branched)
            .unwrap();
        let s = g.sum(out.vision.unwrap());
        let loss = g.mul(s, s).unwrap();
        let grads = g.backward(loss).unwrap();
        let last = model.cfg.layers - 1;
        for leaf in ["wo", "bo", "norm2", "w1", "b1", "w2", "b2"] {
            let gr = grads.param(&pname(BASE, last, leaf), &g).unwrap();
            assert_eq!(gr.max_abs(), 0.0, "{leaf}");
        }
        assert_eq!(grads.param("base/text_head.w", &g).unwrap().max_abs(), 0.0);
        assert!(grads.param(&pname(GEN, last, "w1"), &g).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn heads_are_plain_linear_maps() {
        let mut store = ParamStore::new();
        store.insert("gen/vision_head.w", Tensor::identity(4), false);
        store.insert("gen/vision_head.b", Tensor::zeros(1, 4), false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Tensor::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::inference();
        let v = g.constant(h.clone());
        let out = vision_head(&mut g, &store, v).unwrap();
        assert!(g.value(out).bit_eq(&h));
        let z = g.constant(Tensor::zeros(3, 4));
        let out = vision_head(&mut g, &store, z).unwrap();
        assert_eq!(g.value(out).max_abs(), 0.0);
        let bad = g.constant(Tensor::zeros(3, 5));
        assert!(vision_head(&mut g, &store, bad).is_err());
    }

    #[test]
    fn coarse_generation_grid_uses_pooled_positions() {
        let model = Mllm::new(MllmConfig::default());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.init_base(&mut store, &mut rng);
        model.init_generation_branch(&mut store, &mut rng).unwrap();
        assert!(model.init_generation_positions(&mut store, 3, 3).is_err());
        model.init_generation_positions(&mut store, 4, 4).unwrap();
        let pos = store.get("gen/image_pos").unwrap();
        let base = store.get("base/image_pos").unwrap();
        let want = (base.get(0, 5) + base.get(1, 5) + base.get(8, 5) + base.get(9, 5)) / 4.0;
        assert!((pos.get(0, 5) - want).abs() < 1e-12);

        let mut g = Graph::inference();
        let grid = g.constant(Tensor::randn(16, 16, 1.0, &mut rng));
        let mask = MaskPlane::from_indices(4, 4, &[0, 5, 9]).unwrap();
        let img = model.masked_grid_input(&mut g, &store, grid, &mask).unwrap();
        let out = model.forward(&mut g, &store, &[SegmentInput::Text(vec![1, 2]), SegmentInput::ImgG(img)], Routing::Branched);
        assert_eq!(g.value(out.unwrap().vision.unwrap()).shape(), (16, 16));
        let full = g.constant(Tensor::randn(64, 16, 1.0, &mut rng));
        assert!(model.forward(&mut g, &store, &[SegmentInput::ImgU(full)], Routing::Branched).is_ok());
        let wrong = g.constant(Tensor::randn(64, 16, 1.0, &mut rng));
        assert!(model.forward(&mut g, &store, &[SegmentInput::ImgG(wrong)], Routing::Branched).is_err());
    }
}
