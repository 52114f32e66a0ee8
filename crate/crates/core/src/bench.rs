//! Image-quality metrics, variant comparison, sweeps and report emission.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::flow::{DEFAULT_SCALE, DEFAULT_STEPS};
use crate::latent::{pool_grid, Image};
use crate::params::ParamStore;
use crate::pipeline::Models;
use crate::train::{probe_masked_mse, train_generation_branch, train_latent_controlnet, Checkpoint, MetricsLog, TrainConfig};

/// Disclosure carried by every report.
pub const METRIC_DISCLOSURE: &str = "toy-frechet is a Frechet distance between Gaussian fits of frozen toy-encoder \
features (2x2-pooled grids, 64 dims), a desk-scale stand-in for FID; LPIPS is not computed; \
raw-pixel-latent is a stand-in for a pretrained VAE latent";

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!("images {}x{} and {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)` for images in [0, 1]; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(&a.clamped(), &b.clamped())?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

pub const SSIM_WINDOW: usize = 7;

/// Mean SSIM over all 7×7 windows of every channel, constants for a unit
/// dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (a, b) = (a.clamped(), b.clamped());
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("image {h}x{w} smaller than the SSIM window")));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (a.get(c, y, x), b.get(c, y, x));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Mean and (population) covariance of feature rows.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty feature set".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`, clamped at zero.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, sa) = gaussian_fit(a)?;
    let (mb, sb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Shape(format!("feature widths {} and {}", ma.len(), mb.len())));
    }
    let ra = sqrt_psd(&sa);
    let cross = sqrt_psd(&(&ra * &sb * &ra));
    let d = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Frozen-encoder features: the encoder grid average-pooled to 2×2.
pub fn toy_features(models: &Models, store: &ParamStore, image: &Image) -> Result<Vec<f64>> {
    let grid = models.encoder.encode(image, store)?;
    let side = grid.height();
    let pooled = pool_grid(&grid, (side / 2).max(1))?;
    Ok(pooled.into_tokens().into_data())
}

/// Quality of a generated set against its paired references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub toy_frechet: f64,
}

pub fn compute_metrics(models: &Models, store: &ParamStore, generated: &[Image], reference: &[Image]) -> Result<QualityMetrics> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("empty image set".into()));
    }
    if generated.len() != reference.len() {
        return Err(Error::InvalidArgument(format!("{} generated vs {} reference images", generated.len(), reference.len())));
    }
    let n = generated.len() as f64;
    let mut p = 0.0;
    let mut s = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        // Identical pairs are capped at the 8-bit quantization limit.
        p += psnr(g, r)?.min(PSNR_CAP);
        s += ssim(g, r)?;
    }
    let fg = generated.iter().map(|i| toy_features(models, store, i)).collect::<Result<Vec<_>>>()?;
    let fr = reference.iter().map(|i| toy_features(models, store, i)).collect::<Result<Vec<_>>>()?;
    Ok(QualityMetrics { psnr: p / n, ssim: s / n, toy_frechet: frechet_distance(&fg, &fr)? })
}

/// PSNR of an 8-bit round trip, used as the ceiling for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Untimed samples generated before a decoding-step sweep.
pub const WARMUP_SAMPLES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Validation samples generated and compared.
    pub samples: usize,
    pub decode_steps: usize,
    pub sample_steps: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 64, decode_steps: 64, sample_steps: DEFAULT_STEPS, scale: DEFAULT_SCALE, seed: 0 }
    }
}

/// One row of any report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: String,
    pub variant: String,
    pub seed: u64,
    pub tokens: usize,
    pub decode_steps: usize,
    pub config_hash: String,
    pub masked_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub toy_frechet: f64,
    pub recon_psnr: f64,
    pub train_branch_s: f64,
    pub train_controlnet_s: f64,
    pub generate_ms: f64,
    pub decode_ms: f64,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        [self.masked_mse, self.psnr, self.ssim, self.toy_frechet, self.recon_psnr].iter().all(|v| v.is_finite() || v.is_nan())
            && self.toy_frechet >= 0.0
    }

    /// Every field except wall-clock timings.
    pub fn metrics_eq(&self, other: &MetricReport) -> bool {
        let strip = |r: &MetricReport| MetricReport { train_branch_s: 0.0, train_controlnet_s: 0.0, generate_ms: 0.0, decode_ms: 0.0, ..r.clone() };
        let (a, b) = (strip(self), strip(other));
        serde_json::to_string(&a).ok() == serde_json::to_string(&b).ok()
    }
}

/// Generation quality of a trained checkpoint on the first
/// `eval.samples` validation captions, plus timing.
pub struct Evaluation {
    pub quality: QualityMetrics,
    pub recon_psnr: f64,
    pub masked_mse: f64,
    pub generate_ms: f64,
    pub decode_ms: f64,
    pub images: Vec<Image>,
}

pub fn evaluate(ck: &Checkpoint, val: &SyntheticDataset, eval: &EvalConfig) -> Result<Evaluation> {
    let m = ck.models()?;
    let store = &ck.params;
    let variant = ck.config.variant;
    let n = eval.samples.min(val.len());
    if n == 0 {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let samples = &val.samples[..n];
    let mut images = Vec::with_capacity(n);
    let mut decode = 0.0;
    let started = Instant::now();
    for (i, s) in samples.iter().enumerate() {
        let seed = eval.seed.wrapping_add(i as u64);
        let t = Instant::now();
        let grid = m.predict_grid(store, variant, &s.caption, eval.decode_steps, seed)?;
        decode += t.elapsed().as_secs_f64();
        images.push(m.render_grid(store, variant, &grid, &s.caption, eval.sample_steps, eval.scale, seed)?);
    }
    let generate_ms = started.elapsed().as_secs_f64() * 1e3 / n as f64;
    let reference: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let quality = compute_metrics(&m, store, &images, &reference)?;
    let mut recon = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let seed = eval.seed.wrapping_add(i as u64);
        let img = m.reconstruct(store, variant, &s.image, &s.caption, eval.sample_steps, eval.scale, seed)?;
        recon += psnr(&img, &s.image)?.min(PSNR_CAP);
    }
    let masked_mse = if variant.uses_masked_targets() {
        probe_masked_mse(&m, store, variant, val, n, eval.seed)?
    } else {
        f64::NAN
    };
    Ok(Evaluation { quality, recon_psnr: recon / n as f64, masked_mse, generate_ms, decode_ms: decode * 1e3 / n as f64, images })
}

fn report(kind: &str, cfg: &TrainConfig, eval: &EvalConfig, ev: &Evaluation, branch_s: f64, cn_s: f64) -> MetricReport {
    MetricReport {
        kind: kind.to_string(),
        variant: cfg.variant.id().to_string(),
        seed: cfg.seed,
        tokens: cfg.model.tokens,
        decode_steps: eval.decode_steps,
        config_hash: cfg.hash(),
        masked_mse: ev.masked_mse,
        psnr: ev.quality.psnr,
        ssim: ev.quality.ssim,
        toy_frechet: ev.quality.toy_frechet,
        recon_psnr: ev.recon_psnr,
        train_branch_s: branch_s,
        train_controlnet_s: cn_s,
        generate_ms: ev.generate_ms,
        decode_ms: ev.decode_ms,
    }
}

/// Outcome of one variant run.
pub struct VariantRun {
    pub checkpoint: Checkpoint,
    pub report: MetricReport,
    pub log: MetricsLog,
}

/// Trains the branch then the ControlNet (or adapter) for `cfg.variant`
/// on top of `pretrained` and evaluates the result. Every variant consumes
/// the same batch order and step counts.
pub fn run_variant(
    cfg: &TrainConfig,
    pretrained: &Checkpoint,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    eval: &EvalConfig,
) -> Result<VariantRun> {
    let mut log = MetricsLog::new();
    let t = Instant::now();
    let branch = train_generation_branch(cfg, train, pretrained, Some(&mut log))?;
    let branch_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let full = train_latent_controlnet(cfg, train, &branch, Some(&mut log))?;
    let cn_s = t.elapsed().as_secs_f64();
    let ev = evaluate(&full, val, eval)?;
    let report = report("variant", cfg, eval, &ev, branch_s, cn_s);
    Ok(VariantRun { checkpoint: full, report, log })
}

/// Reconstruction quality per bridge token count. Each count trains its
/// own ControlNet for one epoch on the pooled ground-truth grids.
pub fn sweep_token_count(
    cfg: &TrainConfig,
    counts: &[usize],
    pretrained: &Checkpoint,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    eval: &EvalConfig,
) -> Result<Vec<MetricReport>> {
    let mut rows = Vec::with_capacity(counts.len());
    for &tokens in counts {
        let mut c = cfg.clone();
        c.model.tokens = tokens;
        c.model.validate()?;
        c.controlnet_steps = train.len().div_ceil(c.batch_size);
        let t = Instant::now();
        let ck = train_latent_controlnet(&c, train, pretrained, None)?;
        let cn_s = t.elapsed().as_secs_f64();
        let ev = reconstruct_only(&ck, val, eval)?;
        rows.push(report("token-count", &c, eval, &ev, 0.0, cn_s));
    }
    Ok(rows)
}

/// Reconstruction metrics only: ground-truth grids through the ControlNet.
pub fn reconstruct_only(ck: &Checkpoint, val: &SyntheticDataset, eval: &EvalConfig) -> Result<Evaluation> {
    let m = ck.models()?;
    let store = &ck.params;
    let n = eval.samples.min(val.len());
    if n == 0 {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let samples = &val.samples[..n];
    let started = Instant::now();
    let mut images = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let seed = eval.seed.wrapping_add(i as u64);
        images.push(m.reconstruct(store, ck.config.variant, &s.image, &s.caption, eval.sample_steps, eval.scale, seed)?);
    }
    let generate_ms = started.elapsed().as_secs_f64() * 1e3 / n as f64;
    let reference: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let quality = compute_metrics(&m, store, &images, &reference)?;
    Ok(Evaluation { recon_psnr: quality.psnr, quality, masked_mse: f64::NAN, generate_ms, decode_ms: 0.0, images })
}

/// Generation quality of one trained checkpoint per MAR decoding step count.
pub fn sweep_decoding_steps(ck: &Checkpoint, steps: &[usize], val: &SyntheticDataset, eval: &EvalConfig) -> Result<Vec<MetricReport>> {
    let tokens = ck.config.model.tokens;
    if !ck.config.variant.uses_masked_targets() {
        return Err(Error::InvalidArgument(format!("variant {} has no decoding steps", ck.config.variant.id())));
    }
    if let Some(&k) = steps.iter().find(|&&k| k == 0 || k > tokens) {
        return Err(Error::InvalidArgument(format!("decoding steps {k} outside 1..={tokens}")));
    }
    // Untimed warm-up so the first step count is not charged for cold caches.
    if let Some(&k) = steps.first() {
        evaluate(ck, val, &EvalConfig { decode_steps: k, samples: WARMUP_SAMPLES, ..eval.clone() })?;
    }
    let mut rows = Vec::with_capacity(steps.len());
    for &k in steps {
        let e = EvalConfig { decode_steps: k, ..eval.clone() };
        let ev = evaluate(ck, val, &e)?;
        rows.push(report("decode-steps", &ck.config, &e, &ev, 0.0, 0.0));
    }
    Ok(rows)
}

/// Writes `rows` as CSV with a `#` disclosure line above the fixed header.
pub fn write_csv_report(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# {METRIC_DISCLOSURE}")?;
    let mut w = csv::Writer::from_writer(f);
    if rows.is_empty() {
        w.write_record(REPORT_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "kind",
    "variant",
    "seed",
    "tokens",
    "decode_steps",
    "config_hash",
    "masked_mse",
    "psnr",
    "ssim",
    "toy_frechet",
    "recon_psnr",
    "train_branch_s",
    "train_controlnet_s",
    "generate_ms",
    "decode_ms",
];

pub fn read_csv_report(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricReport>, _>>()?)
}

/// Plot-ready long format: one JSON object per (row, metric) pair, after a
/// disclosure object.
pub fn write_long_jsonl(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", serde_json::json!({ "disclosure": METRIC_DISCLOSURE }))?;
    for r in rows {
        let metrics = [
            ("masked_mse", r.masked_mse),
            ("psnr", r.psnr),
            ("ssim", r.ssim),
            ("toy_frechet", r.toy_frechet),
            ("recon_psnr", r.recon_psnr),
            ("generate_ms", r.generate_ms),
            ("decode_ms", r.decode_ms),
        ];
        for (name, value) in metrics {
            let v = if value.is_finite() { serde_json::json!(value) } else { serde_json::Value::Null };
            let line = serde_json::json!({
                "kind": r.kind,
                "variant": r.variant,
                "seed": r.seed,
                "tokens": r.tokens,
                "decode_steps": r.decode_steps,
                "config_hash": r.config_hash,
                "metric": name,
                "value": v,
            });
            writeln!(f, "{line}")?;
        }
    }
    Ok(())
}
