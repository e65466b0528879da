//! `melrvq`: featurize audio, train quantizers, tokenize, pretrain, iterate,
//! and summarize runs.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical divergence.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use melrvq_core::optim::OptimizerKind;
use melrvq_core::train::InitKind;

use config::{require, PipelineConfig, VqType};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "divergence: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "melrvq", version, about = "Mel residual vector quantizer pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Common {
    /// Pipeline configuration (JSON). Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every stage seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    KmeansSample,
    RandomGaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum VqArg {
    Trained,
    Random,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a directory of WAV files to MELS feature files.
    Featurize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or draw a frozen random) quantizer on a MELS directory.
    TrainRvq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mels_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long)]
        dead_code_threshold: Option<u32>,
        #[arg(long, value_enum)]
        optimizer: Option<OptArg>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        codebook_size: Option<usize>,
        #[arg(long)]
        code_dim: Option<usize>,
        #[arg(long, value_enum)]
        vq_type: Option<VqArg>,
    },
    /// Encode MELS files into MTOK token files.
    Tokenize {
        #[arg(long)]
        rvq: PathBuf,
        #[arg(long)]
        mels_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV per file.
        #[arg(long)]
        csv: bool,
    },
    /// Masked-prediction pretraining on quantizer tokens.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mels_dir: Option<PathBuf>,
        #[arg(long)]
        rvq: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        segment_frames: Option<usize>,
        #[arg(long)]
        mask_prob: Option<f64>,
    },
    /// Quantize a pretrained model's latents and pretrain a fresh model on them.
    Iterate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mels_dir: Option<PathBuf>,
        /// Stage-one model (MTOY).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        rvq_steps: Option<usize>,
    },
    /// Merge run reports into ablation and per-layer tables.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the contrastive loss against its oracle and invariances.
    DclSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn set_path(dst: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *dst = v;
    }
}

fn threads_from_env() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MELRVQ_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| CliError::Usage(format!("MELRVQ_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Usage("MELRVQ_THREADS must be at least 1".into()));
        }
        melrvq_core::par::set_thread_cap(n);
    }
    Ok(())
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    threads_from_env()?;
    match cli.cmd {
        Cmd::Featurize { common, audio_dir, out } => {
            let mut cfg = load(&common)?;
            set_path(&mut cfg.paths.audio_dir, audio_dir);
            set_path(&mut cfg.paths.mels_dir, out);
            let cfg = cfg.resolve()?;
            let audio = require(&cfg.paths.audio_dir, "audio_dir")?;
            let out = require(&cfg.paths.mels_dir, "mels_dir")?;
            print(&commands::featurize(&cfg, &audio, &out)?);
        }
        Cmd::TrainRvq {
            common,
            mels_dir,
            out,
            steps,
            learning_rate,
            batch_size,
            init,
            dead_code_threshold,
            optimizer,
            stages,
            codebook_size,
            code_dim,
            vq_type,
        } => {
            let mut cfg = load(&common)?;
            set_path(&mut cfg.paths.mels_dir, mels_dir);
            set_path(&mut cfg.paths.run_dir, out);
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.dead_code_threshold, dead_code_threshold);
            set(&mut cfg.rvq.stages, stages);
            set(&mut cfg.rvq.codebook_size, codebook_size);
            set(&mut cfg.rvq.code_dim, code_dim);
            if let Some(i) = init {
                cfg.train.init = match i {
                    InitArg::KmeansSample => InitKind::KmeansSample,
                    InitArg::RandomGaussian => InitKind::RandomGaussian,
                };
            }
            if let Some(o) = optimizer {
                cfg.train.optimizer = match o {
                    OptArg::Sgd => OptimizerKind::Sgd,
                    OptArg::Adam => OptimizerKind::default(),
                };
            }
            if let Some(v) = vq_type {
                cfg.vq_type = match v {
                    VqArg::Trained => VqType::Trained,
                    VqArg::Random => VqType::Random,
                };
            }
            let cfg = cfg.resolve()?;
            let mels = require(&cfg.paths.mels_dir, "mels_dir")?;
            let out = require(&cfg.paths.run_dir, "run_dir")?;
            print(&commands::train_rvq(&cfg, &mels, &out)?);
        }
        Cmd::Tokenize { rvq, mels_dir, out, csv } => {
            print(&commands::tokenize(&rvq, &mels_dir, &out, csv)?);
        }
        Cmd::Pretrain {
            common,
            mels_dir,
            rvq,
            out,
            steps,
            learning_rate,
            batch_size,
            segment_frames,
            mask_prob,
        } => {
            let mut cfg = load(&common)?;
            set_path(&mut cfg.paths.mels_dir, mels_dir);
            set_path(&mut cfg.paths.rvq, rvq);
            set_path(&mut cfg.paths.run_dir, out);
            set(&mut cfg.pretrain.steps, steps);
            set(&mut cfg.pretrain.learning_rate, learning_rate);
            set(&mut cfg.pretrain.batch_size, batch_size);
            set(&mut cfg.pretrain.segment_frames, segment_frames);
            set(&mut cfg.mask.mask_prob, mask_prob);
            let cfg = cfg.resolve()?;
            let mels = require(&cfg.paths.mels_dir, "mels_dir")?;
            let rvq = require(&cfg.paths.rvq, "rvq")?;
            let out = require(&cfg.paths.run_dir, "run_dir")?;
            print(&commands::cmd_pretrain(&cfg, &mels, &rvq, &out)?);
        }
        Cmd::Iterate {
            common,
            mels_dir,
            model,
            out,
            layer,
            steps,
            rvq_steps,
        } => {
            let mut cfg = load(&common)?;
            set_path(&mut cfg.paths.mels_dir, mels_dir);
            set_path(&mut cfg.paths.model, model);
            set_path(&mut cfg.paths.run_dir, out);
            if layer.is_some() {
                cfg.iterate.layer = layer;
            }
            set(&mut cfg.pretrain.steps, steps);
            set(&mut cfg.iterate.train.steps, rvq_steps);
            let cfg = cfg.resolve()?;
            let mels = require(&cfg.paths.mels_dir, "mels_dir")?;
            let model = require(&cfg.paths.model, "model")?;
            let out = require(&cfg.paths.run_dir, "run_dir")?;
            print(&commands::cmd_iterate(&cfg, &mels, &model, &out)?);
        }
        Cmd::Report { run_dir, out } => {
            print(&commands::report(&run_dir, &out)?);
        }
        Cmd::DclSelftest { seed } => {
            let r = commands::dcl_selftest(seed);
            print(&serde_json::to_value(&r).expect("json"));
            if !r.passed {
                return Err(CliError::Divergence("contrastive self-test failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("melrvq: {e}");
            ExitCode::from(e.code())
        }
    }
}
