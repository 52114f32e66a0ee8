//! Rectified-flow toy backbone and the latent ControlNet adapter.
//!
//! The backbone denoises a pixel latent: the image average-pooled to an
//! 8×8×3 grid, mapped to `[-1, 1]` and packed 2×2 into 16 tokens of 12
//! channels. Text enters as a second token stream and through the pooled
//! conditioning vector that also carries the flow time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::latent::{Downsample, Image, PatchGrid};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BACKBONE: &str = "backbone";
pub const CONTROLNET: &str = "controlnet";
pub const XATTN: &str = "xattn";

/// Default number of Euler steps when sampling.
pub const DEFAULT_STEPS: usize = 28;
/// Default ControlNet conditioning scale.
pub const DEFAULT_SCALE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub latent_pool: usize,
    pub pack: usize,
    pub dim: usize,
    pub heads: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub max_text: usize,
    pub time_freqs: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_pool: 4,
            pack: 2,
            dim: 32,
            heads: 2,
            double_blocks: 6,
            single_blocks: 2,
            mlp_ratio: 4,
            vocab: 64,
            max_text: 24,
            time_freqs: 16,
        }
    }
}

impl BackboneConfig {
    /// Side of the pixel-latent grid.
    pub fn latent_side(&self) -> usize {
        self.image_size / self.latent_pool
    }

    /// Side of the packed token grid.
    pub fn token_side(&self) -> usize {
        self.latent_side() / self.pack
    }

    pub fn tokens(&self) -> usize {
        self.token_side() * self.token_side()
    }

    pub fn channels(&self) -> usize {
        3 * self.pack * self.pack
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.latent_pool > 0
            && self.pack > 0
            && self.image_size.is_multiple_of(self.latent_pool * self.pack)
            && self.image_size > 0
            && self.heads > 0
            && self.dim.is_multiple_of(self.heads)
            && self.time_freqs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent backbone config {self:?}")))
        }
    }
}

/// Pools, rescales and packs an image into `[tokens, channels]`.
pub fn image_to_latent(image: &Image, cfg: &BackboneConfig) -> Result<Tensor> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return shape_err(format!(
            "image {}x{} for a backbone of size {}",
            image.height(),
            image.width(),
            cfg.image_size
        ));
    }
    let (pool, pack, side) = (cfg.latent_pool, cfg.pack, cfg.token_side());
    let mut out = Tensor::zeros(cfg.tokens(), cfg.channels());
    let norm = (pool * pool) as f64;
    for ti in 0..side {
        for tj in 0..side {
            for c in 0..3 {
                for dy in 0..pack {
                    for dx in 0..pack {
                        let (ly, lx) = (ti * pack + dy, tj * pack + dx);
                        let mut acc = 0.0;
                        for py in 0..pool {
                            for px in 0..pool {
                                acc += image.get(c, ly * pool + py, lx * pool + px);
                            }
                        }
                        out.set(ti * side + tj, (c * pack + dy) * pack + dx, 2.0 * acc / norm - 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`image_to_latent`] up to pooling: nearest upsampling, clamped to `[0, 1]`.
pub fn latent_to_image(latent: &Tensor, cfg: &BackboneConfig) -> Result<Image> {
    if latent.shape() != (cfg.tokens(), cfg.channels()) {
        return shape_err(format!("latent {:?} for backbone tokens {}", latent.shape(), cfg.tokens()));
    }
    let (pool, pack, side, s) = (cfg.latent_pool, cfg.pack, cfg.token_side(), cfg.image_size);
    let mut img = Image::filled(s, s, [0.0; 3]);
    for y in 0..s {
        for x in 0..s {
            let (ly, lx) = (y / pool, x / pool);
            let tok = (ly / pack) * side + lx / pack;
            for c in 0..3 {
                let v = latent.get(tok, (c * pack + ly % pack) * pack + lx % pack);
                img.set(c, y, x, ((v + 1.0) / 2.0).clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// `z_t = (1 − t)·z0 + t·eps`.
pub fn flow_forward_process(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")));
    }
    z0.zip_map(eps, |a, b| (1.0 - t) * a + t * b)
}

/// Target velocity `eps − z0`.
pub fn flow_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(z0)
}

/// Mean squared error between `v_pred` and `eps − z0`, on the tape.
pub fn flow_matching_loss(g: &mut Graph, v_pred: Var, z0: &Tensor, eps: &Tensor) -> Result<Var> {
    let target = flow_target(z0, eps)?;
    g.mse_const(v_pred, target)
}

/// Same loss on plain tensors.
pub fn flow_matching_loss_value(v_pred: &Tensor, z0: &Tensor, eps: &Tensor) -> Result<f64> {
    let target = flow_target(z0, eps)?;
    let diff = v_pred.sub(&target)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Sinusoidal features of `1000·t`, `[1, 2·freqs]`.
pub fn time_features(t: f64, freqs: usize) -> Tensor {
    let mut out = Tensor::zeros(1, 2 * freqs);
    for k in 0..freqs {
        let w = (-(10_000f64).ln() * k as f64 / freqs as f64).exp();
        let a = 1000.0 * t * w;
        out.set(0, k, a.sin());
        out.set(0, freqs + k, a.cos());
    }
    out
}

/// Flow times visited by an Euler sampler: `1, 1 − 1/n, ..., 0`.
pub fn euler_timesteps(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    Ok((0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect())
}

/// Standard normal starting latent for a seed.
pub fn initial_noise(cfg: &BackboneConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(cfg.tokens(), cfg.channels(), 1.0, &mut rng)
}

/// Per-block additive residuals: `double[i]` goes to the image stream after
/// double block `i`, `single[j]` to the image rows after single block `j`.
#[derive(Clone, Debug)]
pub struct ControlResiduals<T> {
    pub double: Vec<T>,
    pub single: Vec<T>,
}

impl<T> Default for ControlResiduals<T> {
    fn default() -> Self {
        Self { double: Vec::new(), single: Vec::new() }
    }
}

impl<T> ControlResiduals<T> {
    pub fn len(&self) -> usize {
        self.double.len() + self.single.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ControlResiduals<Var> {
    pub fn values(&self, g: &Graph) -> ControlResiduals<Tensor> {
        ControlResiduals {
            double: self.double.iter().map(|&v| g.value(v).clone()).collect(),
            single: self.single.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

/// How the backbone is steered during a forward pass.
pub enum Guidance<'a> {
    None,
    Residuals(&'a ControlResiduals<Var>),
    CrossAttn { adapter: &'a CrossAttnAdapter, tokens: Var },
}

/// Backbone streams after embedding.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub img: Var,
    pub txt: Var,
    /// SiLU of the conditioning vector, `[1, dim]`.
    pub cond: Var,
}

#[derive(Clone, Debug)]
pub struct FlowBackbone {
    pub cfg: BackboneConfig,
}

fn p(prefix: &str, leaf: &str) -> String {
    format!("{prefix}/{leaf}")
}

fn insert_linear<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(fan_in, fan_out, std, rng), false);
    store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out), false);
}

/// Modulation projection producing `chunks` rows of width `dim`. Shift and
/// scale start near zero and gates near one.
fn insert_modulation<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, chunks: &[bool], rng: &mut R) {
    let std = 0.1 / (dim as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(dim, chunks.len() * dim, std, rng), false);
    let mut b = Tensor::zeros(1, chunks.len() * dim);
    for (k, &gate) in chunks.iter().enumerate() {
        if gate {
            b.data_mut()[k * dim..(k + 1) * dim].fill(1.0);
        }
    }
    store.insert(format!("{name}.b"), b, false);
}

fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.rms_norm(x, None)?;
    let s1 = g.add_scalar(scale, 1.0);
    let h = g.mul_row(h, s1)?;
    g.add_row(h, shift)
}

/// Splits a `[1, k·dim]` modulation row into `k` rows.
fn chunks(g: &mut Graph, m: Var, k: usize, dim: usize) -> Result<Vec<Var>> {
    (0..k).map(|i| g.slice_cols(m, i * dim, dim)).collect()
}

/// Adds `r` unless it is a constant made only of zeros, which keeps
/// zero-residual passes bit-identical to unguided ones.
fn add_residual(g: &mut Graph, x: Var, r: Var) -> Result<Var> {
    if !g.requires_grad(r) && g.value(r).data().iter().all(|&v| v == 0.0) {
        return Ok(x);
    }
    g.add(x, r)
}

impl FlowBackbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let d = c.dim;
        let b = BACKBONE;
        insert_linear(store, &p(b, "img_in"), c.channels(), d, rng);
        store.insert(p(b, "img_pos"), Tensor::randn(c.tokens(), d, 0.1, rng), false);
        store.insert(p(b, "txt_emb"), Tensor::randn(c.vocab, d, 1.0, rng), false);
        store.insert(p(b, "txt_pos"), Tensor::randn(c.max_text, d, 0.1, rng), false);
        insert_linear(store, &p(b, "time1"), 2 * c.time_freqs, d, rng);
        insert_linear(store, &p(b, "time2"), d, d, rng);
        insert_linear(store, &p(b, "txt_pool"), d, d, rng);
        for i in 0..c.double_blocks {
            for stream in ["img", "txt"] {
                self.init_stream(store, &format!("{b}/double.{i}.{stream}"), rng);
            }
        }
        for j in 0..c.single_blocks {
            self.init_single(store, &format!("{b}/single.{j}"), rng);
        }
        insert_modulation(store, &p(b, "final.mod"), d, &[false, false], rng);
        let w = Tensor::randn(d, c.channels(), 0.1 / (d as f64).sqrt(), rng);
        store.insert(p(b, "final.w"), w, false);
        store.insert(p(b, "final.b"), Tensor::zeros(1, c.channels()), false);
    }

    fn init_stream<R: Rng>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let d = self.cfg.dim;
        let hid = self.cfg.mlp_ratio * d;
        insert_modulation(store, &p(prefix, "mod"), d, &[false, false, true, false, false, true], rng);
        insert_linear(store, &p(prefix, "qkv"), d, 3 * d, rng);
        insert_linear(store, &p(prefix, "o"), d, d, rng);
        insert_linear(store, &p(prefix, "mlp1"), d, hid, rng);
        insert_linear(store, &p(prefix, "mlp2"), hid, d, rng);
    }

    fn init_single<R: Rng>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let d = self.cfg.dim;
        let hid = self.cfg.mlp_ratio * d;
        insert_modulation(store, &p(prefix, "mod"), d, &[false, false, true], rng);
        insert_linear(store, &p(prefix, "qkv"), d, 3 * d, rng);
        insert_linear(store, &p(prefix, "o"), d, d, rng);
        insert_linear(store, &p(prefix, "mlp1"), d, hid, rng);
        insert_linear(store, &p(prefix, "mlp2"), hid, d, rng);
    }

    /// Token streams and conditioning vector for `(z_t, t, text)`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, z: Var, t: f64, text: &[usize]) -> Result<Embedded> {
        let c = &self.cfg;
        if g.value(z).shape() != (c.tokens(), c.channels()) {
            return shape_err(format!("latent {:?}, expected {:?}", g.value(z).shape(), (c.tokens(), c.channels())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")));
        }
        if text.is_empty() || text.len() > c.max_text {
            return Err(Error::InvalidArgument(format!("prompt of {} tokens (max {})", text.len(), c.max_text)));
        }
        if let Some(&bad) = text.iter().find(|&&id| id >= c.vocab) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocab {}", c.vocab)));
        }
        let img = linear(g, store, &p(BACKBONE, "img_in"), z)?;
        let pos = g.param(store, &p(BACKBONE, "img_pos"))?;
        let img = g.add(img, pos)?;

        let emb = g.param(store, &p(BACKBONE, "txt_emb"))?;
        let tpos = g.param(store, &p(BACKBONE, "txt_pos"))?;
        let e = g.select_rows(emb, text)?;
        let tp = g.slice_rows(tpos, 0, text.len())?;
        let txt = g.add(e, tp)?;

        let tf = g.constant(time_features(t, c.time_freqs));
        let h = linear(g, store, &p(BACKBONE, "time1"), tf)?;
        let h = g.silu(h);
        let temb = linear(g, store, &p(BACKBONE, "time2"), h)?;
        let pooled = g.mean_rows(txt);
        let pooled = linear(g, store, &p(BACKBONE, "txt_pool"), pooled)?;
        let cvec = g.add(temb, pooled)?;
        let cond = g.silu(cvec);
        Ok(Embedded { img, txt, cond })
    }

    /// Dual-stream block with joint attention. `prefix` selects the weights,
    /// so ControlNet copies run through the same code.
    pub fn double_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: &str,
        img: Var,
        txt: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.dim;
        let nt = g.value(txt).rows();
        let ni = g.value(img).rows();
        let mut mods = Vec::with_capacity(2);
        let mut qkvs = Vec::with_capacity(2);
        for (stream, x) in [("txt", txt), ("img", img)] {
            let sp = format!("{prefix}.{stream}");
            let m = linear(g, store, &p(&sp, "mod"), cond)?;
            let m = chunks(g, m, 6, d)?;
            let h = modulate(g, x, m[0], m[1])?;
            qkvs.push(linear(g, store, &p(&sp, "qkv"), h)?);
            mods.push(m);
        }
        let qkv = g.concat_rows(&qkvs)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let attn = g.attention(q, k, v, self.cfg.heads, None)?;
        let parts = [g.slice_rows(attn, 0, nt)?, g.slice_rows(attn, nt, ni)?];

        let mut out = Vec::with_capacity(2);
        for (s, (stream, x)) in [("txt", txt), ("img", img)].into_iter().enumerate() {
            let sp = format!("{prefix}.{stream}");
            let m = &mods[s];
            let o = linear(g, store, &p(&sp, "o"), parts[s])?;
            let o = g.mul_row(o, m[2])?;
            let x = g.add(x, o)?;
            let h = modulate(g, x, m[3], m[4])?;
            let h = linear(g, store, &p(&sp, "mlp1"), h)?;
            let h = g.gelu(h);
            let h = linear(g, store, &p(&sp, "mlp2"), h)?;
            let h = g.mul_row(h, m[5])?;
            out.push(g.add(x, h)?);
        }
        Ok((out[1], out[0]))
    }

    /// Shared-weight block over the concatenated `[txt; img]` sequence.
    pub fn single_block(&self, g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, cond: Var) -> Result<Var> {
        let d = self.cfg.dim;
        let m = linear(g, store, &p(prefix, "mod"), cond)?;
        let m = chunks(g, m, 3, d)?;
        let h = modulate(g, x, m[0], m[1])?;
        let qkv = linear(g, store, &p(prefix, "qkv"), h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let attn = g.attention(q, k, v, self.cfg.heads, None)?;
        let a = linear(g, store, &p(prefix, "o"), attn)?;
        let f = linear(g, store, &p(prefix, "mlp1"), h)?;
        let f = g.gelu(f);
        let f = linear(g, store, &p(prefix, "mlp2"), f)?;
        let sum = g.add(a, f)?;
        let sum = g.mul_row(sum, m[2])?;
        g.add(x, sum)
    }

    /// Adds `r` to the image rows of a `[txt; img]` sequence.
    fn add_to_image_rows(&self, g: &mut Graph, x: Var, nt: usize, r: Var) -> Result<Var> {
        if !g.requires_grad(r) && g.value(r).data().iter().all(|&v| v == 0.0) {
            return Ok(x);
        }
        let ni = g.value(x).rows() - nt;
        let t = g.slice_rows(x, 0, nt)?;
        let i = g.slice_rows(x, nt, ni)?;
        let i = g.add(i, r)?;
        g.concat_rows(&[t, i])
    }

    /// Predicted velocity `[tokens, channels]` at `(z, t)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        t: f64,
        text: &[usize],
        guidance: &Guidance,
    ) -> Result<Var> {
        let c = &self.cfg;
        if let Guidance::Residuals(r) = guidance {
            if r.double.len() > c.double_blocks || r.single.len() > c.single_blocks {
                return Err(Error::InvalidArgument(format!(
                    "{} double / {} single residuals for {} / {} blocks",
                    r.double.len(),
                    r.single.len(),
                    c.double_blocks,
                    c.single_blocks
                )));
            }
        }
        let e = self.embed(g, store, z, t, text)?;
        let (mut img, mut txt) = (e.img, e.txt);
        for i in 0..c.double_blocks {
            (img, txt) = self.double_block(g, store, &format!("{BACKBONE}/double.{i}"), img, txt, e.cond)?;
            match guidance {
                Guidance::Residuals(r) => {
                    if let Some(&res) = r.double.get(i) {
                        img = add_residual(g, img, res)?;
                    }
                }
                Guidance::CrossAttn { adapter, tokens } if i < adapter.blocks => {
                    let res = adapter.block(g, store, i, img, *tokens)?;
                    img = add_residual(g, img, res)?;
                }
                _ => {}
            }
        }
        let nt = g.value(txt).rows();
        let mut x = g.concat_rows(&[txt, img])?;
        for j in 0..c.single_blocks {
            x = self.single_block(g, store, &format!("{BACKBONE}/single.{j}"), x, e.cond)?;
            if let Guidance::Residuals(r) = guidance {
                if let Some(&res) = r.single.get(j) {
                    x = self.add_to_image_rows(g, x, nt, res)?;
                }
            }
        }
        let img = g.slice_rows(x, nt, c.tokens())?;
        let m = linear(g, store, &p(BACKBONE, "final.mod"), e.cond)?;
        let m = chunks(g, m, 2, c.dim)?;
        let h = modulate(g, img, m[0], m[1])?;
        linear(g, store, &p(BACKBONE, "final"), h)
    }

    /// Velocity as a plain tensor.
    pub fn velocity(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: f64,
        text: &[usize],
        residuals: &ControlResiduals<Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let r = ControlResiduals {
            double: residuals.double.iter().map(|r| g.constant(r.clone())).collect(),
            single: residuals.single.iter().map(|r| g.constant(r.clone())).collect(),
        };
        let v = self.forward(&mut g, store, zv, t, text, &Guidance::Residuals(&r))?;
        Ok(g.value(v).clone())
    }

    /// Flow-matching loss of one `(z0, eps, t, text)` sample on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z0: &Tensor,
        eps: &Tensor,
        t: f64,
        text: &[usize],
        guidance: &Guidance,
    ) -> Result<Var> {
        let zt = flow_forward_process(z0, eps, t)?;
        let zv = g.constant(zt);
        let v = self.forward(g, store, zv, t, text, guidance)?;
        flow_matching_loss(g, v, z0, eps)
    }
}

/// One Euler step `z_{t−dt} = z_t − dt·v(z_t, t)` with residual guidance.
pub fn guided_denoise_step(
    backbone: &FlowBackbone,
    store: &ParamStore,
    residuals: &ControlResiduals<Tensor>,
    z_t: &Tensor,
    t: f64,
    dt: f64,
    text: &[usize],
) -> Result<Tensor> {
    if dt <= 0.0 || t - dt < -1e-12 {
        return Err(Error::InvalidArgument(format!("Euler step dt={dt} from t={t}")));
    }
    let v = backbone.velocity(store, z_t, t, text, residuals)?;
    z_t.zip_map(&v, |z, v| z - dt * v)
}

/// Trainable ControlNet over patch grids: a stride-2 downsample, an input
/// projection into the backbone width, trainable copies of the first
/// double and single blocks, and zero-initialized residual projections.
#[derive(Clone, Debug)]
pub struct LatentControlNet {
    pub grid_dim: usize,
    pub grid_side: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
}

impl LatentControlNet {
    /// Four double and one single controlled block.
    pub fn new(grid_dim: usize, grid_side: usize) -> Self {
        Self { grid_dim, grid_side, double_blocks: 4, single_blocks: 1 }
    }

    pub fn downsample(&self) -> Downsample {
        Downsample::new(format!("{CONTROLNET}/down"), self.grid_dim, self.grid_dim)
    }

    fn check(&self, backbone: &FlowBackbone) -> Result<()> {
        let c = &backbone.cfg;
        if self.double_blocks > c.double_blocks || self.single_blocks > c.single_blocks {
            return Err(Error::InvalidArgument("ControlNet controls more blocks than the backbone has".into()));
        }
        if !self.grid_side.is_multiple_of(2) || (self.grid_side / 2).pow(2) != c.tokens() {
            return shape_err(format!(
                "control grid side {} does not downsample onto {} backbone tokens",
                self.grid_side,
                c.tokens()
            ));
        }
        Ok(())
    }

    /// Copies the controlled backbone blocks and adds the new layers.
    pub fn init<R: Rng>(&self, backbone: &FlowBackbone, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.check(backbone)?;
        let d = backbone.cfg.dim;
        let mut copies = Vec::new();
        for i in 0..self.double_blocks {
            let src = format!("{BACKBONE}/double.{i}.");
            for n in store.names_with_prefix(&src) {
                copies.push((n.to_string(), format!("{CONTROLNET}/double.{i}.{}", &n[src.len()..])));
            }
        }
        for j in 0..self.single_blocks {
            let src = format!("{BACKBONE}/single.{j}/");
            for n in store.names_with_prefix(&src) {
                copies.push((n.to_string(), format!("{CONTROLNET}/single.{j}/{}", &n[src.len()..])));
            }
        }
        if copies.is_empty() {
            return Err(Error::MissingParam(format!("{BACKBONE}/double.0.*")));
        }
        for (src, dst) in copies {
            let t = store.get(&src)?.clone();
            store.insert(dst, t, false);
        }
        self.downsample().init(store, rng, false);
        insert_linear(store, &p(CONTROLNET, "cond_in"), self.grid_dim, d, rng);
        for k in 0..self.double_blocks + self.single_blocks {
            store.insert(format!("{CONTROLNET}/zero.{k}.w"), Tensor::zeros(d, d), false);
            store.insert(format!("{CONTROLNET}/zero.{k}.b"), Tensor::zeros(1, d), false);
        }
        Ok(())
    }

    /// Residuals for every controlled block, each multiplied by `scale`.
    /// `grid` is `[grid_side², grid_dim]` in raster order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        backbone: &FlowBackbone,
        z: Var,
        t: f64,
        text: &[usize],
        grid: Var,
        scale: f64,
    ) -> Result<ControlResiduals<Var>> {
        self.check(backbone)?;
        if scale < 0.0 || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("conditioning scale {scale}")));
        }
        let expect = (self.grid_side * self.grid_side, self.grid_dim);
        if g.value(grid).shape() != expect {
            return shape_err(format!("control grid {:?}, expected {expect:?}", g.value(grid).shape()));
        }
        let e = backbone.embed(g, store, z, t, text)?;
        let down = self.downsample().forward(g, store, grid, self.grid_side, self.grid_side)?;
        let cond = linear(g, store, &p(CONTROLNET, "cond_in"), down)?;
        let mut img = g.add(e.img, cond)?;
        let mut txt = e.txt;
        let mut out = ControlResiduals::default();
        for i in 0..self.double_blocks {
            (img, txt) = backbone.double_block(g, store, &format!("{CONTROLNET}/double.{i}"), img, txt, e.cond)?;
            let r = linear(g, store, &format!("{CONTROLNET}/zero.{i}"), img)?;
            out.double.push(g.scale(r, scale));
        }
        if self.single_blocks > 0 {
            let nt = g.value(txt).rows();
            let ni = g.value(img).rows();
            let mut x = g.concat_rows(&[txt, img])?;
            for j in 0..self.single_blocks {
                x = backbone.single_block(g, store, &format!("{CONTROLNET}/single.{j}"), x, e.cond)?;
                let xi = g.slice_rows(x, nt, ni)?;
                let r = linear(g, store, &format!("{CONTROLNET}/zero.{}", self.double_blocks + j), xi)?;
                out.single.push(g.scale(r, scale));
            }
        }
        Ok(out)
    }

    /// Residual tensors for one sampling step.
    #[allow(clippy::too_many_arguments)]
    pub fn residuals(
        &self,
        store: &ParamStore,
        backbone: &FlowBackbone,
        z: &Tensor,
        t: f64,
        text: &[usize],
        grid: &PatchGrid,
        scale: f64,
    ) -> Result<ControlResiduals<Tensor>> {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let gv = g.constant(grid.tokens().clone());
        let r = self.forward(&mut g, store, backbone, zv, t, text, gv, scale)?;
        Ok(r.values(&g))
    }
}

/// Convenience wrapper matching the operation name used by the trainers.
#[allow(clippy::too_many_arguments)]
pub fn controlnet_forward(
    cn: &LatentControlNet,
    store: &ParamStore,
    backbone: &FlowBackbone,
    z: &Tensor,
    t: f64,
    text: &[usize],
    grid: &PatchGrid,
    scale: f64,
) -> Result<ControlResiduals<Tensor>> {
    cn.residuals(store, backbone, z, t, text, grid, scale)
}

/// Trainable cross-attention from backbone image tokens onto a flat token
/// list, added after each of the first `blocks` double blocks. The output
/// projection is bias-free and zero-initialized.
#[derive(Clone, Debug)]
pub struct CrossAttnAdapter {
    pub token_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl CrossAttnAdapter {
    pub fn new(backbone: &FlowBackbone, token_dim: usize) -> Self {
        Self { token_dim, dim: backbone.cfg.dim, heads: backbone.cfg.heads, blocks: 4.min(backbone.cfg.double_blocks) }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for i in 0..self.blocks {
            let pre = format!("{XATTN}/{i}");
            insert_linear(store, &p(&pre, "q"), self.dim, self.dim, rng);
            insert_linear(store, &p(&pre, "k"), self.token_dim, self.dim, rng);
            insert_linear(store, &p(&pre, "v"), self.token_dim, self.dim, rng);
            store.insert(p(&pre, "o.w"), Tensor::zeros(self.dim, self.dim), false);
        }
    }

    /// Cross-attention output for block `i`.
    pub fn block(&self, g: &mut Graph, store: &ParamStore, i: usize, img: Var, tokens: Var) -> Result<Var> {
        if g.value(tokens).cols() != self.token_dim {
            return shape_err(format!("tokens of width {}, expected {}", g.value(tokens).cols(), self.token_dim));
        }
        let pre = format!("{XATTN}/{i}");
        let h = g.rms_norm(img, None)?;
        let q = linear(g, store, &p(&pre, "q"), h)?;
        let k = linear(g, store, &p(&pre, "k"), tokens)?;
        let v = linear(g, store, &p(&pre, "v"), tokens)?;
        let a = g.attention(q, k, v, self.heads, None)?;
        let o = g.param(store, &p(&pre, "o.w"))?;
        g.matmul(a, o)
    }
}

/// What steers a sampling run.
pub enum Control<'a> {
    None,
    ControlNet { cn: &'a LatentControlNet, grid: &'a PatchGrid, scale: f64 },
    CrossAttn { adapter: &'a CrossAttnAdapter, tokens: &'a Tensor },
}

/// Euler sampling from seeded noise at `t = 1` down to `t = 0`.
pub fn sample_latent(
    backbone: &FlowBackbone,
    store: &ParamStore,
    control: &Control,
    text: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let ts = euler_timesteps(steps)?;
    let mut z = initial_noise(&backbone.cfg, seed);
    for w in ts.windows(2) {
        let (t, dt) = (w[0], w[0] - w[1]);
        z = match control {
            Control::None => guided_denoise_step(backbone, store, &ControlResiduals::default(), &z, t, dt, text)?,
            Control::ControlNet { cn, grid, scale } => {
                let r = cn.residuals(store, backbone, &z, t, text, grid, *scale)?;
                guided_denoise_step(backbone, store, &r, &z, t, dt, text)?
            }
            Control::CrossAttn { adapter, tokens } => {
                let mut g = Graph::inference();
                let zv = g.constant(z.clone());
                let tv = g.constant((*tokens).clone());
                let v = backbone.forward(&mut g, store, zv, t, text, &Guidance::CrossAttn { adapter, tokens: tv })?;
                z.zip_map(g.value(v), |z, v| z - dt * v)?
            }
        };
    }
    Ok(z)
}

/// ControlNet-guided sample; `cn = None` gives the unconditional backbone sample.
pub fn sample_image(
    backbone: &FlowBackbone,
    store: &ParamStore,
    cn: Option<(&LatentControlNet, &PatchGrid)>,
    text: &[usize],
    steps: usize,
    scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let control = match cn {
        Some((cn, grid)) => Control::ControlNet { cn, grid, scale },
        None => Control::None,
    };
    sample_latent(backbone, store, &control, text, steps, seed)
}

/// Sample steered by cross-attention onto `tokens` instead of a ControlNet.
pub fn cross_attention_condition(
    backbone: &FlowBackbone,
    store: &ParamStore,
    adapter: &CrossAttnAdapter,
    tokens: &Tensor,
    text: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    sample_latent(backbone, store, &Control::CrossAttn { adapter, tokens }, text, steps, seed)
}
