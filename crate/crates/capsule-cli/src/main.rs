//! `capsule` — train and evaluate a desk-scale prompt compressor.

use anyhow::Result;
use capsule_cli::{Method, RunConfig};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "capsule",
    about = "Compress long prompts into short capsule prompts with a tiny trained language model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (JSON).
    #[arg(long, global = true, default_value = "configs/desk.json")]
    config: PathBuf,
    /// Top-level seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config value.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config overrides as dotted key=value pairs, repeatable
    /// (e.g. --override train.max_steps=100).
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base language model on the corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the compressor against the frozen scorer.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate capsule prompts for the test split (or an input file).
    Compress {
        #[command(flatten)]
        common: Common,
        /// Compression method.
        #[arg(long, value_enum, default_value = "nano")]
        method: MethodArg,
        /// Optional JSONL prompts file; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run a token-dropping baseline (compress with the configured method).
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Baseline method; defaults to the config's baseline.method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate a capsules file: accuracy, compression rate, cost.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Capsule prompts file; defaults to the nano capsules.
        #[arg(long)]
        capsules: Option<PathBuf>,
    },
    /// Cost accounting for a capsules file.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        capsules: Option<PathBuf>,
    },
    /// Latency benchmark: original vs compressed prompts across batch sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        capsules: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Nano,
    ZeroShot,
    SelectiveContext,
    RandomDrop,
    Original,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Nano => Method::Nano,
            MethodArg::ZeroShot => Method::ZeroShot,
            MethodArg::SelectiveContext => Method::SelectiveContext,
            MethodArg::RandomDrop => Method::RandomDrop,
            MethodArg::Original => Method::Original,
        }
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    RunConfig::load(
        &common.config,
        &common.overrides,
        common.seed,
        common.out.clone(),
    )
}

fn method_name_from_path(path: &std::path::Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "capsules".into())
        .trim_start_matches("capsules_")
        .to_string()
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load(&common)?;
            let path = capsule_cli::run_pretrain(&cfg)?;
            println!("{}", path.display());
        }
        Command::Train { common } => {
            let cfg = load(&common)?;
            let path = capsule_cli::run_train(&cfg)?;
            println!("{}", path.display());
        }
        Command::Compress {
            common,
            method,
            input,
        } => {
            let cfg = load(&common)?;
            let path = capsule_cli::run_compress(&cfg, method.into(), input.as_deref())?;
            println!("{}", path.display());
        }
        Command::Baseline {
            common,
            method,
            input,
        } => {
            let cfg = load(&common)?;
            let method = method.map(Method::from).unwrap_or(cfg.baseline.method);
            let path = capsule_cli::run_compress(&cfg, method, input.as_deref())?;
            println!("{}", path.display());
        }
        Command::Eval { common, capsules } => {
            let cfg = load(&common)?;
            let path = capsules.unwrap_or_else(|| cfg.capsules_path(Method::Nano));
            let name = method_name_from_path(&path);
            capsule_cli::run_eval(&cfg, &path, &name)?;
        }
        Command::Cost { common, capsules } => {
            let cfg = load(&common)?;
            let path = capsules.unwrap_or_else(|| cfg.capsules_path(Method::Nano));
            let name = method_name_from_path(&path);
            capsule_cli::run_cost(&cfg, &path, &name)?;
        }
        Command::Bench { common, capsules } => {
            let cfg = load(&common)?;
            let path = capsules.unwrap_or_else(|| cfg.capsules_path(Method::Nano));
            capsule_cli::run_bench(&cfg, &path)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
