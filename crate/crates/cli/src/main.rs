mod commands;
mod config;
mod error;
mod predio;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "lasslab", version, about = "Latent linear-ODE trajectory models for power-system transients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for artifacts whose paths are not set explicitly.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate the configured corpus into a dataset directory.
    Generate,
    /// Train the base model on pretrain-tagged records.
    Pretrain,
    /// Fit expert centroids on fine-tune features and write an untrained bank.
    Cluster,
    /// Train the bank's low-rank factors on fine-tune records.
    Finetune,
    /// Write per-record prediction CSVs for the configured tags.
    Predict {
        /// Ignore any expert bank and predict with the base model.
        #[arg(long)]
        base: bool,
    },
    /// Score a predictions directory against the dataset.
    Eval,
    /// Time linear versus MLP integration and model inference.
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Pretrain => "pretrain",
            Command::Cluster => "cluster",
            Command::Finetune => "finetune",
            Command::Predict { .. } => "predict",
            Command::Eval => "eval",
            Command::Bench => "bench",
        }
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    outputs: Vec<PathBuf>,
    wall_seconds: f64,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    let overrides = [
        (&cli.dataset, &mut cfg.paths.dataset),
        (&cli.model, &mut cfg.paths.model),
        (&cli.bank, &mut cfg.paths.bank),
        (&cli.predictions, &mut cfg.paths.predictions),
    ];
    for (flag, slot) in overrides {
        if let Some(p) = flag {
            *slot = Some(p.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("LASSLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config("LASSLAB_THREADS", format!("expected a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config("LASSLAB_THREADS", e.to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = effective_config(cli)?;
    let paths = cfg.resolve()?;
    let start = Instant::now();
    let outcome = match cli.command {
        Command::Generate => commands::generate(&cfg, &paths),
        Command::Pretrain => commands::pretrain(&cfg, &paths),
        Command::Cluster => commands::cluster(&cfg, &paths),
        Command::Finetune => commands::finetune_bank(&cfg, &paths),
        Command::Predict { base } => commands::predict(&cfg, &paths, base),
        Command::Eval => commands::eval(&cfg, &paths),
        Command::Bench => commands::bench(&cfg, &paths),
    }?;
    let summary = RunSummary {
        command: cli.command.name(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        outputs: outcome.outputs,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let path = outcome.summary_dir.join("run_summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    predio::write_file(&path, &text).map_err(|source| CliError::Runtime {
        command: cli.command.name(),
        source: source.staged("write-summary"),
    })?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lasslab: {e}");
            e.exit_code()
        }
    }
}
