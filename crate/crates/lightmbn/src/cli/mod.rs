//! Command-line surface: training with ablation toggles, evaluation,
//! retrieval, embedding dumps, and plot-data export.
//!
//! Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure. Errors print a
//! single machine-parsable line (`E_USAGE:` / `E_DATA:` / `E_NUMERIC:`)
//! to stderr.

mod ablate;
mod config;
mod evalcmd;
mod export;
mod manifest;
mod train;


pub use ablate::{cmd_ablate, parse_matrix, AblationResult, AblationRow};
pub use config::{DatasetSpec, RunConfig};
pub use evalcmd::{cmd_eval, cmd_retrieve, restore_model, run_config_of, RetrievalRow};
pub use export::{cmd_export, ExportKind};
pub use manifest::{EpochRecord, FinalMetrics, RunManifest};
pub use train::{cmd_train, embed_role, run_final_eval, TrainOutcome};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::DataError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn code_tag(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Data(_) => "E_DATA",
            CliError::Numeric(_) => "E_NUMERIC",
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "lightmbn", about = "multi-branch person re-identification pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (synthetic data by default).
    Train(TrainArgs),
    /// Evaluate a finished run: CMC and both mAP conventions.
    Eval(EvalArgs),
    /// Rank a gallery embedding dump against a probe image.
    Retrieve(RetrieveArgs),
    /// Export plot data (schedule, cmc, loss-curve) from a run.
    Export(ExportArgs),
    /// Run an ablation matrix of branch/technique toggles.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the synthetic dataset.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long = "per-id")]
    per_id: Option<usize>,
    /// Market-style dataset root directory.
    #[arg(long = "dataset-root")]
    dataset_root: Option<PathBuf>,
    /// JSON split file applied on top of the dataset root.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Branch toggles, e.g. G+C+P, G, C+P.
    #[arg(long)]
    branches: Option<String>,
    /// Constant-then-step schedule instead of warmup cosine annealing.
    #[arg(long = "no-wca")]
    no_wca: bool,
    /// Ranking loss: ms or triplet.
    #[arg(long)]
    ranking: Option<String>,
    #[arg(long = "no-drop-block")]
    no_drop_block: bool,
    /// Generic override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding config.resolved and checkpoint.lmbn.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    run: PathBuf,
    /// Probe image (png/jpg).
    #[arg(long)]
    probe: PathBuf,
    /// Gallery embedding dump (written by eval).
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long = "top-k", default_value = "10")]
    top_k: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// What to export: schedule, cmc, or loss-curve.
    what: String,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// CSV matrix of configurations (columns: branches, wca, ms, db).
    #[arg(long)]
    matrix: PathBuf,
    /// Base config applied to every row.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if args.synthetic {
        cfg.set("dataset.kind", "synthetic")?;
    }
    if let Some(root) = &args.dataset_root {
        cfg.set("dataset.root", &root.display().to_string())?;
    }
    if let Some(split) = &args.split {
        cfg.set("dataset.split", &split.display().to_string())?;
    }
    if let Some(ids) = args.ids {
        cfg.set("dataset.ids", &ids.to_string())?;
    }
    if let Some(per_id) = args.per_id {
        cfg.set("dataset.per_id", &per_id.to_string())?;
    }
    if let Some(epochs) = args.epochs {
        cfg.set("schedule.epochs", &epochs.to_string())?;
    }
    if let Some(branches) = &args.branches {
        cfg.set("model.branches", branches)?;
    }
    if args.no_wca {
        cfg.set("objective.wca", "false")?;
    }
    if let Some(ranking) = &args.ranking {
        cfg.set("objective.ranking", ranking)?;
    }
    if args.no_drop_block {
        cfg.set("objective.drop_block", "false")?;
    }
    if let Some(seed) = args.seed {
        cfg.set("train.seed", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        cfg.set("train.out", &out.display().to_string())?;
    }
    apply_sets(&mut cfg, &args.set)?;
    Ok(cfg)
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for kv in sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = build_train_config(&args)?;
            let outcome = cmd_train(&cfg)?;
            println!(
                "trained {} epochs -> {} (checkpoint {})",
                cfg.epochs,
                outcome.out_dir.display(),
                outcome.checkpoint.display()
            );
            if let Some(m) = &outcome.manifest.final_metrics {
                println!(
                    "rank1={:.6} map_modern={:.6} map_legacy={:.6}",
                    m.rank1, m.map_modern, m.map_legacy
                );
            }
            Ok(())
        }
        Cmd::Eval(args) => {
            cmd_eval(&args.run, args.checkpoint.as_deref(), args.out.as_deref())?;
            Ok(())
        }
        Cmd::Retrieve(args) => {
            cmd_retrieve(&args.run, &args.probe, &args.gallery, args.top_k)?;
            Ok(())
        }
        Cmd::Export(args) => {
            let kind = ExportKind::parse(&args.what)?;
            let path = cmd_export(kind, &args.run, args.out.as_deref())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Cmd::Ablate(args) => {
            let mut base = RunConfig::default();
            if let Some(path) = &args.config {
                base.apply_file(path)?;
            }
            if let Some(seed) = args.seed {
                base.seed = seed;
            }
            apply_sets(&mut base, &args.set)?;
            let out = args.out.unwrap_or_else(|| PathBuf::from("runs/ablation"));
            cmd_ablate(&args.matrix, &base, &out)?;
            Ok(())
        }
    }
}

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {}", e.code_tag(), e);
            e.exit_code()
        }
    }
}
