use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use patchbridge::bench::{
    evaluate, run_variant, sweep_decoding_steps, sweep_token_count, write_csv_report, write_long_jsonl, EvalConfig,
    MetricReport,
};
use patchbridge::data::{tokenize, train_val_split, SyntheticDataset};
use patchbridge::latent::write_grid;
use patchbridge::pipeline::{Variant, ALL_VARIANTS};
use patchbridge::train::{
    advance, initial_checkpoint, start_branch, start_controlnet, Checkpoint, MetricsLog, Phase, TrainConfig,
};
use patchbridge::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "patchbridge", version, about = "Toy patch-latent bridge: data, training, generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the shapes dataset and write it to a directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training images.
        #[arg(long, default_value_t = 2048)]
        n: usize,
        /// Held-out validation images.
        #[arg(long, default_value_t = 64)]
        val: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Pretrain the backbone, encoder and base MLLM; freezes them.
    Pretrain(TrainArgs),
    /// Train the generation branch on a pretrained checkpoint.
    TrainBranch(TrainArgs),
    /// Train the ControlNet (or cross-attention adapter) on a checkpoint.
    TrainCn(TrainArgs),
    /// Generate one image from a caption.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate a trained checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run a sweep and write a report.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Trained checkpoint for decode-steps, pretrained one otherwise.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        /// Decoding step counts for `decode-steps`.
        #[arg(long, value_delimiter = ',', default_value = "1,8,64")]
        steps: Vec<usize>,
        /// Bridge token counts for `token-count`.
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        counts: Vec<usize>,
        /// Training config for `token-count` and `variants`; defaults to the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    DecodeSteps,
    TokenCount,
    Variants,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint of the previous phase (required after pretraining).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Continue an interrupted run of this phase from its checkpoint.
    #[arg(long, conflicts_with = "from")]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Bridge token count (perfect square dividing the encoder grid).
    #[arg(long)]
    tokens: Option<usize>,
    /// Per-step metrics CSV; appended to.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this many steps of this invocation; the checkpoint stays
    /// unfrozen so `--resume` can finish the phase.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    decode_steps: usize,
    #[arg(long, default_value_t = patchbridge::flow::DEFAULT_STEPS)]
    sample_steps: usize,
    #[arg(long, default_value_t = patchbridge::flow::DEFAULT_SCALE)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            samples: self.samples,
            decode_steps: self.decode_steps,
            sample_steps: self.sample_steps,
            scale: self.scale,
            seed: self.eval_seed,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    n_train: usize,
    n_val: usize,
    train_checksum: String,
    val_checksum: String,
}

const MANIFEST: &str = "dataset.json";

fn load_data(dir: &Path) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let (train, val) = train_val_split(m.seed, m.n_train, m.n_val)?;
    if train.checksum() != m.train_checksum || val.checksum() != m.val_checksum {
        return Err(Error::Format(format!("dataset in {} does not match its manifest", dir.display())));
    }
    Ok((train, val))
}

fn gen_data(seed: u64, n: usize, n_val: usize, out: &Path) -> Result<()> {
    let (train, val) = train_val_split(seed, n, n_val)?;
    train.write_dir(&out.join("train"))?;
    val.write_dir(&out.join("val"))?;
    let manifest = DatasetManifest {
        seed,
        n_train: n,
        n_val,
        train_checksum: train.checksum(),
        val_checksum: val.checksum(),
    };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {n} training and {n_val} validation samples to {} ({})", out.display(), manifest.train_checksum);
    Ok(())
}

fn train(phase: Phase, a: &TrainArgs) -> Result<()> {
    let (train_set, _) = load_data(&a.data)?;
    let mut log = match &a.log {
        Some(p) => MetricsLog::to_csv(p)?,
        None => MetricsLog::new(),
    };
    let mut ck = if let Some(r) = &a.resume {
        let ck = Checkpoint::load(r)?;
        if ck.phase != phase {
            return Err(Error::InvalidArgument(format!("checkpoint is in phase {}", ck.phase.id())));
        }
        ck
    } else {
        let prev = a.from.as_deref().map(Checkpoint::load).transpose()?;
        let mut cfg = match (&a.config, &prev) {
            (Some(p), _) => TrainConfig::load(p)?,
            (None, Some(prev)) => prev.config.clone(),
            (None, None) => TrainConfig::default(),
        };
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = a.variant {
            cfg.variant = v;
        }
        if let Some(v) = a.tokens {
            cfg.model.tokens = v;
        }
        match phase {
            Phase::PretrainBackbone => {
                cfg.pretrain_steps = a.steps.unwrap_or(cfg.pretrain_steps);
                cfg.pretrain_lr = a.lr.unwrap_or(cfg.pretrain_lr);
            }
            Phase::TrainBranch => {
                cfg.branch_steps = a.steps.unwrap_or(cfg.branch_steps);
                cfg.branch_lr = a.lr.unwrap_or(cfg.branch_lr);
            }
            Phase::TrainControlnet => {
                cfg.controlnet_steps = a.steps.unwrap_or(cfg.controlnet_steps);
                cfg.controlnet_lr = a.lr.unwrap_or(cfg.controlnet_lr);
            }
        }
        cfg.phase = phase;
        let need_prev = || Error::InvalidArgument("--from <checkpoint> is required for this phase".into());
        match phase {
            Phase::PretrainBackbone => initial_checkpoint(&cfg)?,
            Phase::TrainBranch => start_branch(&cfg, prev.as_ref().ok_or_else(need_prev)?)?,
            Phase::TrainControlnet => start_controlnet(&cfg, prev.as_ref().ok_or_else(need_prev)?)?,
        }
    };
    let total = ck.config.steps(phase);
    let until = a.stop_after.map_or(total, |k| (ck.step + k).min(total));
    advance(&mut ck, &train_set, until, Some(&mut log))?;
    if ck.step == total {
        for p in ck.config.trainable(phase) {
            ck.params.set_frozen_prefix(&p, true);
        }
    }
    ck.save(&a.out)?;
    let last = log.rows.last().map_or(f64::NAN, |r| r.loss);
    println!("{}: {} steps, final loss {last:.5}, config {} -> {}", phase.id(), ck.step, ck.config.hash(), a.out.display());
    Ok(())
}

fn generate(ckpt: &Path, caption: &str, out: &Path, e: &EvalConfig) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let m = ck.models()?;
    let ids = tokenize(caption)?;
    let variant = ck.config.variant;
    let grid = m.predict_grid(&ck.params, variant, &ids, e.decode_steps, e.seed)?;
    let image = m.render_grid(&ck.params, variant, &grid, &ids, e.sample_steps, e.scale, e.seed)?;
    fs::create_dir_all(out)?;
    write_grid(&grid, BufWriter::new(fs::File::create(out.join("grid.bin"))?))?;
    image.write_ppm(BufWriter::new(fs::File::create(out.join("image.ppm"))?))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn emit(out: &Path, name: &str, rows: &[MetricReport]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_csv_report(&out.join(format!("{name}.csv")), rows)?;
    write_long_jsonl(&out.join(format!("{name}.jsonl")), rows)?;
    for r in rows {
        println!(
            "{} {} tokens={} steps={} psnr={:.3} ssim={:.4} toy-frechet={:.4} recon-psnr={:.3}",
            r.kind, r.variant, r.tokens, r.decode_steps, r.psnr, r.ssim, r.toy_frechet, r.recon_psnr
        );
    }
    println!("wrote {}", out.join(format!("{name}.csv")).display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, e: &EvalConfig) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (_, val) = load_data(data)?;
    let ev = evaluate(&ck, &val, e)?;
    let row = MetricReport {
        kind: "eval".into(),
        variant: ck.config.variant.id().into(),
        seed: ck.config.seed,
        tokens: ck.config.model.tokens,
        decode_steps: e.decode_steps,
        config_hash: ck.config.hash(),
        masked_mse: ev.masked_mse,
        psnr: ev.quality.psnr,
        ssim: ev.quality.ssim,
        toy_frechet: ev.quality.toy_frechet,
        recon_psnr: ev.recon_psnr,
        train_branch_s: 0.0,
        train_controlnet_s: 0.0,
        generate_ms: ev.generate_ms,
        decode_ms: ev.decode_ms,
    };
    let dir = out.join("samples");
    fs::create_dir_all(&dir)?;
    for (i, img) in ev.images.iter().enumerate() {
        img.write_ppm(BufWriter::new(fs::File::create(dir.join(format!("{i:05}.ppm")))?))?;
    }
    emit(out, "eval", &[row])
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    kind: SweepKind,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    steps: &[usize],
    counts: &[usize],
    config: Option<&Path>,
    e: &EvalConfig,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (train_set, val) = load_data(data)?;
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => ck.config.clone(),
    };
    match kind {
        SweepKind::DecodeSteps => emit(out, "decode_steps", &sweep_decoding_steps(&ck, steps, &val, e)?),
        SweepKind::TokenCount => emit(out, "token_count", &sweep_token_count(&cfg, counts, &ck, &train_set, &val, e)?),
        SweepKind::Variants => {
            let mut rows = Vec::new();
            for v in ALL_VARIANTS {
                let c = TrainConfig { variant: v, ..cfg.clone() };
                rows.push(run_variant(&c, &ck, &train_set, &val, e)?.report);
            }
            emit(out, "variants", &rows)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, val, out } => gen_data(seed, n, val, &out),
        Command::Pretrain(a) => train(Phase::PretrainBackbone, &a),
        Command::TrainBranch(a) => train(Phase::TrainBranch, &a),
        Command::TrainCn(a) => train(Phase::TrainControlnet, &a),
        Command::Generate { ckpt, caption, out, eval } => generate(&ckpt, &caption, &out, &eval.config()),
        Command::Eval { ckpt, data, out, eval: e } => eval(&ckpt, &data, &out, &e.config()),
        Command::Sweep { kind, ckpt, data, out, steps, counts, config, eval } => {
            sweep(kind, &ckpt, &data, &out, &steps, &counts, config.as_deref(), &eval.config())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
