//! Decoupled training phases, the Adam optimizer, checkpoints and metric logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::flow::{flow_forward_process, flow_matching_loss, Guidance, BACKBONE, CONTROLNET, XATTN};
use crate::graph::{Graph, TrainFilter, Var};
use crate::latent::{patchify, MaskPlane};
use crate::mar::{masked_mse, sample_training_mask, MaskRatioSampler};
use crate::mllm::{Routing, SegmentInput};
use crate::params::{hex, ParamStore};
use crate::pipeline::{ModelConfig, Models, Variant, ENCODER, ENCODER_AUX, QUERY_TOKENS};
use crate::tensor::Tensor;

pub use crate::gradcheck::finite_difference_check;

/// ControlNet conditioning scale used while training.
pub const TRAIN_SCALE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PretrainBackbone,
    TrainBranch,
    TrainControlnet,
}

impl Phase {
    pub fn id(self) -> &'static str {
        match self {
            Phase::PretrainBackbone => "pretrain-backbone",
            Phase::TrainBranch => "train-branch",
            Phase::TrainControlnet => "train-controlnet",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::PretrainBackbone => 1,
            Phase::TrainBranch => 2,
            Phase::TrainControlnet => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub phase: Phase,
    pub variant: Variant,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub branch_steps: usize,
    pub controlnet_steps: usize,
    pub pretrain_lr: f64,
    pub branch_lr: f64,
    pub controlnet_lr: f64,
    /// Weight of the captioning loss during pretraining.
    pub caption_weight: f64,
    /// Weight of the encoder's patch-reconstruction loss during pretraining.
    pub recon_weight: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phase: Phase::PretrainBackbone,
            variant: Variant::ClipLatent,
            batch_size: 8,
            pretrain_steps: 1000,
            branch_steps: 3000,
            controlnet_steps: 300,
            pretrain_lr: 2e-3,
            branch_lr: 3e-3,
            controlnet_lr: 3e-3,
            caption_weight: 1.0,
            recon_weight: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for lr in [self.pretrain_lr, self.branch_lr, self.controlnet_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("learning rate {lr}")));
            }
        }
        self.model.validate()
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn steps(&self, phase: Phase) -> usize {
        match phase {
            Phase::PretrainBackbone => self.pretrain_steps,
            Phase::TrainBranch => self.branch_steps,
            Phase::TrainControlnet => self.controlnet_steps,
        }
    }

    pub fn lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::PretrainBackbone => self.pretrain_lr,
            Phase::TrainBranch => self.branch_lr,
            Phase::TrainControlnet => self.controlnet_lr,
        }
    }

    /// Parameter namespaces a phase may update under this config's variant.
    pub fn trainable(&self, phase: Phase) -> Vec<String> {
        let v: &[&str] = match (phase, self.variant) {
            (Phase::PretrainBackbone, _) => &["backbone/", "encoder/", "encoder_aux/", "base/"],
            (Phase::TrainBranch, Variant::QueryTokens) => &["gen/", "controlnet/"],
            (Phase::TrainBranch, _) => &["gen/"],
            (Phase::TrainControlnet, Variant::CrossAttn) => &["xattn/"],
            (Phase::TrainControlnet, _) => &["controlnet/"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Adam with a fixed learning rate. Refuses frozen tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update. Fails without touching anything if a gradient
    /// names a frozen or missing tensor or has the wrong shape.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let p = store.param(name)?;
            if p.frozen {
                return Err(Error::FrozenUpdate(name.clone()));
            }
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for {name} {:?}", g.shape(), p.value.shape())));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let w = store.tensor_mut(name)?;
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), w.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                wd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("corrupt RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    phase: Phase,
    step: usize,
    rng: RngState,
    adam: [f64; 4],
    adam_t: u64,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state: named tensors with frozen flags, config
/// snapshot, phase, step counter, noise RNG and optimizer moments.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub phase: Phase,
    pub step: usize,
    pub params: ParamStore,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
}

impl Checkpoint {
    /// `PBCK`, u32 version, u64 header length, JSON header, then every
    /// tensor's f64 values little-endian in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = |it: Vec<(&String, &Tensor, bool)>| -> Vec<TensorEntry> {
            it.into_iter()
                .map(|(n, t, f)| TensorEntry { name: n.clone(), rows: t.rows(), cols: t.cols(), frozen: f })
                .collect()
        };
        let params: Vec<(String, Arc<Tensor>, bool)> =
            self.params.iter().map(|(n, p)| (n.to_string(), p.value.clone(), p.frozen)).collect();
        let header = Header {
            config: self.config.clone(),
            phase: self.phase,
            step: self.step,
            rng: RngState::of(&self.rng),
            adam: [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps],
            adam_t: self.adam.t,
            params: entries(params.iter().map(|(n, t, f)| (n, t.as_ref(), *f)).collect()),
            adam_m: entries(self.adam.m.iter().map(|(n, t)| (n, t, false)).collect()),
            adam_v: entries(self.adam.v.iter().map(|(n, t)| (n, t, false)).collect()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = params.iter().map(|(_, t, _)| t.as_ref()).chain(self.adam.m.values()).chain(self.adam.v.values());
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        let hjson = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(hjson)?;
        let mut data = &body[hlen..];
        let mut take = |e: &TensorEntry| -> Result<Tensor> {
            let n = e.rows * e.cols * 8;
            if data.len() < n {
                return Err(bad("truncated tensor data"));
            }
            let vals = data[..n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[n..];
            Tensor::from_vec(e.rows, e.cols, vals)
        };
        let mut params = ParamStore::new();
        for e in &header.params {
            params.insert(e.name.clone(), take(e)?, e.frozen);
        }
        let [lr, beta1, beta2, eps] = header.adam;
        let mut adam = Adam { lr, beta1, beta2, eps, t: header.adam_t, m: BTreeMap::new(), v: BTreeMap::new() };
        for e in &header.adam_m {
            adam.m.insert(e.name.clone(), take(e)?);
        }
        for e in &header.adam_v {
            adam.v.insert(e.name.clone(), take(e)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config: header.config, phase: header.phase, step: header.step, params, rng: header.rng.restore()?, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Bit-level equality of everything the checkpoint carries.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        match (self.to_bytes(), other.to_bytes()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    }

    pub fn models(&self) -> Result<Models> {
        Models::new(self.config.model.clone())
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub flow: f64,
    pub caption: f64,
    pub recon: f64,
    pub masked_mse: f64,
    pub batch_hash: String,
    pub elapsed_ms: f64,
}

/// Per-step metrics kept in memory and optionally appended to a CSV file.
#[derive(Default)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
    writer: Option<csv::Writer<fs::File>>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `path`, writing the header only when the file is new.
    pub fn to_csv(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { rows: Vec::new(), writer: Some(writer) })
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn batch_hashes(&self, phase: Phase) -> Vec<String> {
        self.rows.iter().filter(|r| r.phase == phase.id()).map(|r| r.batch_hash.clone()).collect()
    }
}

/// Dataset indices of a step's batch: consecutive slices of per-epoch
/// permutations, so the order depends only on `(seed, phase, step)`.
pub fn batch_indices(seed: u64, phase: Phase, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let pos = step * batch + k;
            let epoch = pos / n;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6800_0000 ^ phase.stream());
                rng.set_stream(epoch as u64);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[pos % n]
        })
        .collect()
}

fn batch_hash(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    hex(&h.finalize())[..16].to_string()
}

fn phase_rng(seed: u64, phase: Phase, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase.stream() * 16 + salt);
    rng
}

/// Initial parameters for every pretrained model; nothing frozen except the
/// second encoder, which is never trained.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let models = Models::new(cfg.model.clone())?;
    let mut store = ParamStore::new();
    let mut rng = phase_rng(cfg.seed, Phase::PretrainBackbone, 1);
    models.encoder.init(&mut store, &mut rng, false);
    let patch_width = 3 * cfg.model.patch * cfg.model.patch;
    let std = 1.0 / (cfg.model.grid_dim as f64).sqrt();
    store.insert(format!("{ENCODER_AUX}/recon.w"), Tensor::randn(cfg.model.grid_dim, patch_width, std, &mut rng), false);
    store.insert(format!("{ENCODER_AUX}/recon.b"), Tensor::zeros(1, patch_width), false);
    models.mllm.init_base(&mut store, &mut rng);
    models.backbone.init(&mut store, &mut rng);
    let mut rng2 = phase_rng(cfg.seed, Phase::PretrainBackbone, 2);
    models.second_encoder.init(&mut store, &mut rng2, true);
    Ok(Checkpoint {
        config: cfg.clone(),
        phase: Phase::PretrainBackbone,
        step: 0,
        params: store,
        rng: phase_rng(cfg.seed, Phase::PretrainBackbone, 0),
        adam: Adam::new(cfg.pretrain_lr),
    })
}

fn require_frozen(store: &ParamStore, prefix: &str) -> Result<()> {
    let mut any = false;
    for (name, p) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        any = true;
        if !p.frozen {
            return Err(Error::InvalidArgument(format!("{name} must be frozen before this phase")));
        }
    }
    if any {
        Ok(())
    } else {
        Err(Error::MissingParam(format!("{prefix}*")))
    }
}

/// Carries `prev`'s tensors into a fresh phase: everything already present
/// is frozen and `init` adds the phase's own parameters.
fn start_phase(
    cfg: &TrainConfig,
    prev: &Checkpoint,
    phase: Phase,
    init: impl FnOnce(&Models, &mut ParamStore, &mut ChaCha8Rng) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    // The bridge token count only shapes tensors the phase itself creates.
    let incoming = ModelConfig { tokens: cfg.model.tokens, ..prev.config.model.clone() };
    if cfg.model != incoming {
        return Err(Error::InvalidArgument("model sizes differ from the incoming checkpoint".into()));
    }
    let models = Models::new(cfg.model.clone())?;
    let mut store = prev.params.clone();
    let trainable = cfg.trainable(phase);
    for (name, frozen) in store.iter().map(|(n, p)| (n.to_string(), p.frozen)).collect::<Vec<_>>() {
        if !frozen && !trainable.iter().any(|t| name.starts_with(t.as_str())) {
            store.set_frozen_prefix(&name, true);
        }
    }
    let mut rng = phase_rng(cfg.seed, phase, 1);
    init(&models, &mut store, &mut rng)?;
    Ok(Checkpoint { config: cfg.clone(), phase, step: 0, params: store, rng: phase_rng(cfg.seed, phase, 0), adam: Adam::new(cfg.lr(phase)) })
}

/// Phase-start state for generation-branch training on top of a pretrained
/// checkpoint: `gen/` copies, vision head and mask token, plus positions
/// for coarse grids and, for the query variant, the query grid and a
/// ControlNet trained jointly with it.
pub fn start_branch(cfg: &TrainConfig, prev: &Checkpoint) -> Result<Checkpoint> {
    require_frozen(&prev.params, "base/")?;
    start_phase(cfg, prev, Phase::TrainBranch, |m, store, rng| {
        store.remove_prefix("gen/");
        m.mllm.init_generation_branch(store, rng)?;
        let s = cfg.model.token_side()?;
        if s != cfg.model.grid_side() {
            m.mllm.init_generation_positions(store, s, s)?;
        }
        if cfg.variant == Variant::QueryTokens {
            store.insert(QUERY_TOKENS, Tensor::randn(s * s, cfg.model.grid_dim, 0.5, rng), false);
            if !store.contains(&format!("{CONTROLNET}/zero.0.w")) {
                m.controlnet.init(&m.backbone, store, rng)?;
            }
        }
        Ok(())
    })
}

/// Phase-start state for ControlNet (or cross-attention) training on top
/// of a frozen backbone and encoder.
pub fn start_controlnet(cfg: &TrainConfig, prev: &Checkpoint) -> Result<Checkpoint> {
    require_frozen(&prev.params, &format!("{BACKBONE}/"))?;
    require_frozen(&prev.params, &format!("{ENCODER}/"))?;
    if cfg.variant == Variant::QueryTokens {
        require_frozen(&prev.params, QUERY_TOKENS)?;
    }
    start_phase(cfg, prev, Phase::TrainControlnet, |m, store, rng| {
        match cfg.variant {
            Variant::CrossAttn => {
                store.remove_prefix(&format!("{XATTN}/"));
                m.xattn.init(store, rng);
            }
            Variant::QueryTokens => {
                // Continues the ControlNet trained jointly with the queries.
                store.set_frozen_prefix(&format!("{CONTROLNET}/"), false);
            }
            _ => {
                store.remove_prefix(&format!("{CONTROLNET}/"));
                m.controlnet.init(&m.backbone, store, rng)?;
            }
        }
        Ok(())
    })
}

/// Per-sample loss terms.
struct SampleLoss {
    total: Var,
    parts: Vec<(&'static str, Var)>,
}

fn pretrain_loss(
    cfg: &TrainConfig,
    m: &Models,
    g: &mut Graph,
    store: &ParamStore,
    sample: &crate::data::Sample,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLoss> {
    let z0 = m.image_latent(&sample.image)?;
    let eps = Tensor::randn(z0.rows(), z0.cols(), 1.0, rng);
    let t: f64 = rng.random();
    let flow = m.backbone.loss(g, store, &z0, &eps, t, &sample.caption, &Guidance::None)?;
    let patches = patchify(&sample.image, cfg.model.patch)?;
    let pv = g.constant(patches.clone());
    let grid = m.encoder.forward(g, store, pv)?;
    let caption = m.mllm.caption_loss(g, store, Some(grid), &sample.caption)?;
    let w = g.param(store, &format!("{ENCODER_AUX}/recon.w"))?;
    let b = g.param(store, &format!("{ENCODER_AUX}/recon.b"))?;
    let rec = g.linear(grid, w, Some(b))?;
    let recon = g.mse_const(rec, patches)?;
    let c = g.scale(caption, cfg.caption_weight);
    let r = g.scale(recon, cfg.recon_weight);
    let total = g.add(flow, c)?;
    let total = g.add(total, r)?;
    Ok(SampleLoss { total, parts: vec![("flow", flow), ("caption", caption), ("recon", recon)] })
}

/// Query-token readout on the tape, resized to the ControlNet input.
fn query_control_grid(m: &Models, g: &mut Graph, store: &ParamStore, caption: &[usize]) -> Result<Var> {
    let grid = m.query_readout(g, store, caption)?;
    let s = m.cfg.token_side()?;
    let full = m.cfg.grid_side();
    if s == full {
        return Ok(grid);
    }
    let f = full / s;
    let idx: Vec<Option<usize>> = (0..full * full).map(|c| Some((c / full / f) * s + (c % full) / f)).collect();
    g.gather_rows(grid, Arc::new(idx))
}

#[allow(clippy::too_many_arguments)]
fn controlled_flow_loss(
    m: &Models,
    g: &mut Graph,
    store: &ParamStore,
    z0: &Tensor,
    caption: &[usize],
    control: Var,
    variant: Variant,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let eps = Tensor::randn(z0.rows(), z0.cols(), 1.0, rng);
    let t: f64 = rng.random();
    let zt = g.constant(flow_forward_process(z0, &eps, t)?);
    let v = if variant == Variant::CrossAttn {
        m.backbone.forward(g, store, zt, t, caption, &Guidance::CrossAttn { adapter: &m.xattn, tokens: control })?
    } else {
        let r = m.controlnet.forward(g, store, &m.backbone, zt, t, caption, control, TRAIN_SCALE)?;
        m.backbone.forward(g, store, zt, t, caption, &Guidance::Residuals(&r))?
    };
    flow_matching_loss(g, v, z0, &eps)
}

/// Masked-MSE loss of the generation branch on one sample.
pub fn branch_sample_loss<R: Rng + ?Sized>(
    m: &Models,
    g: &mut Graph,
    store: &ParamStore,
    variant: Variant,
    sample: &crate::data::Sample,
    rng: &mut R,
) -> Result<Var> {
    let target = m.bridge_target(store, variant, &sample.image)?;
    let ratio = MaskRatioSampler::new(0).sample_with(rng);
    let mask_set = sample_training_mask(rng, target.cells(), ratio)?;
    branch_loss_with_mask(m, g, store, &target, &sample.caption, &mask_set)
}

/// Masked-MSE of the branch for a given target grid and mask set.
pub fn branch_loss_with_mask(
    m: &Models,
    g: &mut Graph,
    store: &ParamStore,
    target: &crate::latent::PatchGrid,
    caption: &[usize],
    mask_set: &[usize],
) -> Result<Var> {
    let plane = MaskPlane::from_indices(target.height(), target.width(), mask_set)?;
    let tv = g.constant(target.tokens().clone());
    let img = m.mllm.masked_grid_input(g, store, tv, &plane)?;
    let out = m.mllm.forward(g, store, &[SegmentInput::Text(caption.to_vec()), SegmentInput::ImgG(img)], Routing::Branched)?;
    masked_mse(g, out.vision.expect("ImgG segment present"), target.tokens(), mask_set)
}

fn phase_sample_loss(
    ck: &Checkpoint,
    m: &Models,
    g: &mut Graph,
    sample: &crate::data::Sample,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLoss> {
    let cfg = &ck.config;
    let store = &ck.params;
    match ck.phase {
        Phase::PretrainBackbone => pretrain_loss(cfg, m, g, store, sample, rng),
        Phase::TrainBranch if cfg.variant == Variant::QueryTokens => {
            let z0 = m.image_latent(&sample.image)?;
            let control = query_control_grid(m, g, store, &sample.caption)?;
            let flow = controlled_flow_loss(m, g, store, &z0, &sample.caption, control, cfg.variant, rng)?;
            Ok(SampleLoss { total: flow, parts: vec![("flow", flow)] })
        }
        Phase::TrainBranch => {
            let l = branch_sample_loss(m, g, store, cfg.variant, sample, rng)?;
            Ok(SampleLoss { total: l, parts: vec![("masked_mse", l)] })
        }
        Phase::TrainControlnet => {
            let z0 = m.image_latent(&sample.image)?;
            let control = match cfg.variant {
                Variant::QueryTokens => query_control_grid(m, g, store, &sample.caption)?,
                Variant::CrossAttn => g.constant(m.bridge_target(store, cfg.variant, &sample.image)?.into_tokens()),
                v => {
                    let target = m.bridge_target(store, v, &sample.image)?;
                    g.constant(m.control_grid(&target)?.into_tokens())
                }
            };
            let flow = controlled_flow_loss(m, g, store, &z0, &sample.caption, control, cfg.variant, rng)?;
            Ok(SampleLoss { total: flow, parts: vec![("flow", flow)] })
        }
    }
}

/// Runs optimizer steps until `ck.step == until`. Aborts with
/// [`Error::Divergence`] on a non-finite loss or gradient.
pub fn advance(ck: &mut Checkpoint, data: &SyntheticDataset, until: usize, mut log: Option<&mut MetricsLog>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let m = ck.models()?;
    let filter = TrainFilter::prefixes(&ck.config.trainable(ck.phase));
    while ck.step < until {
        let started = Instant::now();
        let idx = batch_indices(ck.config.seed, ck.phase, ck.step, ck.config.batch_size, data.len());
        let mut g = Graph::new(filter.clone());
        let mut totals = Vec::with_capacity(idx.len());
        let mut parts: BTreeMap<&'static str, Vec<Var>> = BTreeMap::new();
        let mut rng = ck.rng.clone();
        for &i in &idx {
            let l = phase_sample_loss(ck, &m, &mut g, &data.samples[i], &mut rng)?;
            totals.push(l.total);
            for (k, v) in l.parts {
                parts.entry(k).or_default().push(v);
            }
        }
        let stacked = g.concat_rows(&totals)?;
        let loss = g.mean_rows(stacked);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step: ck.step, loss: value });
        }
        let grads = g.backward(loss)?.params(&g);
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence { step: ck.step, loss: value });
        }
        ck.adam.step(&mut ck.params, &grads)?;
        ck.rng = rng;
        let mean = |k: &str| -> f64 {
            parts.get(k).map_or(f64::NAN, |vs| vs.iter().map(|&v| g.value(v).data()[0]).sum::<f64>() / vs.len() as f64)
        };
        let row = LogRow {
            phase: ck.phase.id().to_string(),
            step: ck.step,
            loss: value,
            flow: mean("flow"),
            caption: mean("caption"),
            recon: mean("recon"),
            masked_mse: mean("masked_mse"),
            batch_hash: batch_hash(&idx),
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        ck.step += 1;
        if let Some(l) = log.as_deref_mut() {
            l.push(row)?;
        }
    }
    Ok(())
}

/// Freezes the namespaces a finished phase trained.
fn finish(mut ck: Checkpoint) -> Checkpoint {
    for p in ck.config.trainable(ck.phase) {
        ck.params.set_frozen_prefix(&p, true);
    }
    ck
}

/// Pretrains the toy backbone (flow matching) together with the encoder
/// and base MLLM (captioning plus patch reconstruction). Everything trained
/// here is frozen in the returned checkpoint.
pub fn pretrain_toy_backbone(cfg: &TrainConfig, data: &SyntheticDataset, log: Option<&mut MetricsLog>) -> Result<Checkpoint> {
    let mut ck = initial_checkpoint(cfg)?;
    advance(&mut ck, data, cfg.pretrain_steps, log)?;
    Ok(finish(ck))
}

/// Trains the generation branch against frozen base weights.
pub fn train_generation_branch(
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    pretrained: &Checkpoint,
    log: Option<&mut MetricsLog>,
) -> Result<Checkpoint> {
    let mut ck = start_branch(cfg, pretrained)?;
    advance(&mut ck, data, cfg.branch_steps, log)?;
    Ok(finish(ck))
}

/// Trains the ControlNet (or cross-attention adapter) on teacher-forced
/// bridge grids against the frozen backbone.
pub fn train_latent_controlnet(
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    prev: &Checkpoint,
    log: Option<&mut MetricsLog>,
) -> Result<Checkpoint> {
    let mut ck = start_controlnet(cfg, prev)?;
    advance(&mut ck, data, cfg.controlnet_steps, log)?;
    Ok(finish(ck))
}

/// Mean unconditional flow loss over the first `n` samples with noise and
/// times fixed by `seed`.
pub fn probe_flow_loss(m: &Models, store: &ParamStore, data: &SyntheticDataset, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(data.len()).max(1);
    let mut acc = 0.0;
    for s in &data.samples[..n] {
        let z0 = m.image_latent(&s.image)?;
        let eps = Tensor::randn(z0.rows(), z0.cols(), 1.0, &mut rng);
        let t: f64 = rng.random();
        let mut g = Graph::inference();
        let l = m.backbone.loss(&mut g, store, &z0, &eps, t, &s.caption, &Guidance::None)?;
        acc += g.value(l).data()[0];
    }
    Ok(acc / n as f64)
}

/// Mean masked-MSE of the branch over the first `n` samples with mask
/// ratios and sets fixed by `seed`.
pub fn probe_masked_mse(
    m: &Models,
    store: &ParamStore,
    variant: Variant,
    data: &SyntheticDataset,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(data.len()).max(1);
    let mut acc = 0.0;
    for s in &data.samples[..n] {
        let mut g = Graph::inference();
        let l = branch_sample_loss(m, &mut g, store, variant, s, &mut rng)?;
        acc += g.value(l).data()[0];
    }
    Ok(acc / n as f64)
}

/// Mean guided flow loss (ControlNet or cross-attention) over the first
/// `n` samples, teacher-forced, with noise fixed by `seed`.
pub fn probe_control_loss(ck: &Checkpoint, data: &SyntheticDataset, n: usize, seed: u64) -> Result<f64> {
    let m = ck.models()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(data.len()).max(1);
    let probe = Checkpoint { phase: Phase::TrainControlnet, ..ck.clone() };
    let mut acc = 0.0;
    for s in &data.samples[..n] {
        let mut g = Graph::inference();
        let l = phase_sample_loss(&probe, &m, &mut g, s, &mut rng)?;
        acc += g.value(l.total).data()[0];
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::flow::CONTROLNET;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig { batch_size: 2, pretrain_steps: steps, branch_steps: steps, controlnet_steps: steps, ..Default::default() }
    }

    fn data() -> SyntheticDataset {
        generate_synthetic_dataset(11, 12).unwrap()
    }

    fn frozen_pretrained() -> Checkpoint {
        pretrain_toy_backbone(&tiny(0), &data(), None).unwrap()
    }

    #[test]
    fn zero_steps_equals_initialization() {
        let cfg = tiny(0);
        let init = initial_checkpoint(&cfg).unwrap();
        let done = pretrain_toy_backbone(&cfg, &data(), None).unwrap();
        assert_eq!(done.step, 0);
        assert_eq!(init.params.checksum(""), done.params.checksum(""));
        assert!(done.params.iter().all(|(_, p)| p.frozen));
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let a = pretrain_toy_backbone(&tiny(3), &data(), None).unwrap();
        let b = pretrain_toy_backbone(&tiny(3), &data(), None).unwrap();
        assert!(a.bit_eq(&b));
        let c = pretrain_toy_backbone(&TrainConfig { seed: 1, ..tiny(3) }, &data(), None).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn resume_restores_the_trajectory() {
        let d = data();
        let cfg = tiny(4);
        let mut straight = initial_checkpoint(&cfg).unwrap();
        advance(&mut straight, &d, 4, None).unwrap();

        let mut half = initial_checkpoint(&cfg).unwrap();
        advance(&mut half, &d, 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        half.save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap();
        assert!(resumed.bit_eq(&half));
        advance(&mut resumed, &d, 4, None).unwrap();
        assert!(resumed.bit_eq(&straight));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let ck = initial_checkpoint(&tiny(0)).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), false);
        let mut adam = Adam::new(0.1);
        adam.step(&mut s, &[("w".into(), Tensor::from_vec(1, 3, vec![0.5, -2.0, 0.0]).unwrap())]).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn adam_refuses_frozen_tensors_without_side_effects() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(1, 2, 1.0), false);
        s.insert("b", Tensor::full(1, 2, 1.0), true);
        let before = s.checksum("");
        let mut adam = Adam::new(0.1);
        let g = Tensor::full(1, 2, 1.0);
        let err = adam.step(&mut s, &[("a".into(), g.clone()), ("b".into(), g)]).unwrap_err();
        assert!(matches!(err, Error::FrozenUpdate(n) if n == "b"));
        assert_eq!(s.checksum(""), before);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn nan_loss_aborts_with_divergence() {
        let mut ck = initial_checkpoint(&tiny(2)).unwrap();
        ck.params.tensor_mut("backbone/final.b").unwrap().data_mut()[0] = f64::NAN;
        let err = advance(&mut ck, &data(), 2, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn batches_depend_only_on_seed_phase_and_step() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(3, Phase::TrainBranch, step, 2, n) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "{seen:?}");
        assert_eq!(batch_indices(3, Phase::TrainBranch, 7, 3, n), batch_indices(3, Phase::TrainBranch, 7, 3, n));
        assert_ne!(batch_indices(3, Phase::TrainBranch, 0, 10, n), batch_indices(3, Phase::TrainControlnet, 0, 10, n));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig { seed: 5, variant: Variant::CrossAttn, ..tiny(7) };
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainConfig::default().hash(), cfg.hash());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 1.0").is_err());
        assert_eq!(TrainConfig::from_toml("seed = 3").unwrap().seed, 3);
    }

    #[test]
    fn branch_requires_a_frozen_base() {
        let init = initial_checkpoint(&tiny(0)).unwrap();
        assert!(start_branch(&tiny(0), &init).is_err());
        assert!(start_controlnet(&tiny(0), &init).is_err());
    }

    #[test]
    fn branch_training_touches_only_the_branch() {
        let pre = frozen_pretrained();
        let mut log = MetricsLog::new();
        let ck = train_generation_branch(&tiny(3), &data(), &pre, Some(&mut log)).unwrap();
        for prefix in ["base/", "backbone/", "encoder/", "encoder2/"] {
            assert_eq!(pre.params.checksum(prefix), ck.params.checksum(prefix), "{prefix}");
        }
        let start = start_branch(&tiny(3), &pre).unwrap();
        assert_ne!(start.params.checksum("gen/"), ck.params.checksum("gen/"));
        assert_eq!(log.rows.len(), 3);
        assert!(log.rows.iter().all(|r| r.masked_mse.is_finite()));
    }

    #[test]
    fn controlnet_training_touches_only_the_controlnet() {
        let pre = frozen_pretrained();
        let ck = train_latent_controlnet(&tiny(2), &data(), &pre, None).unwrap();
        for prefix in ["base/", "backbone/", "encoder/"] {
            assert_eq!(pre.params.checksum(prefix), ck.params.checksum(prefix), "{prefix}");
        }
        let start = start_controlnet(&tiny(2), &pre).unwrap();
        assert_ne!(start.params.checksum(&format!("{CONTROLNET}/")), ck.params.checksum(&format!("{CONTROLNET}/")));
    }

    #[test]
    fn step_zero_losses_match_the_initial_models() {
        let d = data();
        let pre = frozen_pretrained();
        let m = pre.models().unwrap();
        let cfg = tiny(1);

        let mut ck = start_controlnet(&cfg, &pre).unwrap();
        let mut rng = ck.rng.clone();
        let mut log = MetricsLog::new();
        let idx = batch_indices(cfg.seed, Phase::TrainControlnet, 0, cfg.batch_size, d.len());
        advance(&mut ck, &d, 1, Some(&mut log)).unwrap();
        let mut expect = 0.0;
        for &i in &idx {
            let s = &d.samples[i];
            let z0 = m.image_latent(&s.image).unwrap();
            let eps = Tensor::randn(z0.rows(), z0.cols(), 1.0, &mut rng);
            let t: f64 = rng.random();
            let mut g = Graph::inference();
            let l = m.backbone.loss(&mut g, &pre.params, &z0, &eps, t, &s.caption, &Guidance::None).unwrap();
            expect += g.value(l).data()[0];
        }
        expect /= idx.len() as f64;
        assert!((log.rows[0].loss - expect).abs() < 1e-12, "{} vs {expect}", log.rows[0].loss);

        let mut ck = start_branch(&cfg, &pre).unwrap();
        let init = ck.params.clone();
        let mut rng = ck.rng.clone();
        let mut log = MetricsLog::new();
        let idx = batch_indices(cfg.seed, Phase::TrainBranch, 0, cfg.batch_size, d.len());
        advance(&mut ck, &d, 1, Some(&mut log)).unwrap();
        let mut expect = 0.0;
        for &i in &idx {
            let mut g = Graph::inference();
            let l = branch_sample_loss(&m, &mut g, &init, Variant::ClipLatent, &d.samples[i], &mut rng).unwrap();
            expect += g.value(l).data()[0];
        }
        expect /= idx.len() as f64;
        assert!((log.rows[0].loss - expect).abs() < 1e-12);
    }

    #[test]
    fn phase_order_does_not_change_either_phase() {
        let d = data();
        let pre = frozen_pretrained();
        let cfg = tiny(2);
        let b1 = train_generation_branch(&cfg, &d, &pre, None).unwrap();
        let bc = train_latent_controlnet(&cfg, &d, &b1, None).unwrap();
        let c1 = train_latent_controlnet(&cfg, &d, &pre, None).unwrap();
        let cb = train_generation_branch(&cfg, &d, &c1, None).unwrap();
        assert_eq!(bc.params.checksum("gen/"), cb.params.checksum("gen/"));
        assert_eq!(bc.params.checksum("controlnet/"), cb.params.checksum("controlnet/"));
    }

    #[test]
    fn csv_log_appends_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = MetricsLog::to_csv(&path).unwrap();
        let _ = pretrain_toy_backbone(&tiny(2), &data(), Some(&mut log)).unwrap();
        drop(log);
        let mut log = MetricsLog::to_csv(&path).unwrap();
        let mut ck = start_controlnet(&tiny(1), &frozen_pretrained()).unwrap();
        advance(&mut ck, &data(), 1, Some(&mut log)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("phase,step,loss"));
    }
}
