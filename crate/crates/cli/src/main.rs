use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hdvnet::infer::InferenceMode;

mod commands;
mod config;

use commands::Failure;
use config::{PipelineConfig, TableFormat, DATA_DIR_ENV};

/// Density-aware point-cloud segmentation pipeline.
///
/// Every flag has a config-file equivalent; flags win. The data directory
/// falls back to the HDVNET_DATA_DIR environment variable, then `data`.
#[derive(Debug, Parser)]
#[command(name = "hdvnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint the command reads or writes.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Table format for `eval` and `report` on stdout.
    #[arg(long, global = true, value_enum)]
    format: Option<TableFormat>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Final,
    TrainingClassifiers,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-cast the configured synthetic scenes into the data directory.
    GenScene,
    /// Calibrate density-state thresholds on the training scenes.
    Calibrate,
    /// Build the point pyramid of one cloud and write its index lists.
    Subsample {
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// Level-1 size; later levels follow the quartering rule.
        #[arg(long)]
        n1: Option<usize>,
    },
    /// Train the backbone and per-density classifiers.
    Train,
    /// Fine-tune the final classifier from the backbone checkpoint.
    Finetune,
    /// Predict every point of the test scenes (or the given clouds).
    Infer {
        #[arg(long)]
        cloud: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Score predictions against the test labels, per density state.
    Eval,
    /// Render the per-density table and density histograms.
    Report,
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Failure::Usage(format!("missing config: {}", p.display()))),
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = Some(d.clone());
    } else if cfg.data_dir.is_none() {
        cfg.data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
    if let Some(c) = &cli.checkpoint {
        match cli.command {
            Command::Infer { .. } => cfg.final_checkpoint = Some(c.clone()),
            _ => cfg.checkpoint = Some(c.clone()),
        }
    }
    if let Command::Infer { mode: Some(m), .. } = &cli.command {
        cfg.inference = match m {
            ModeArg::Final => InferenceMode::Final,
            ModeArg::TrainingClassifiers => InferenceMode::TrainingClassifiers,
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::GenScene => commands::gen_scene(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Subsample { cloud, n1 } => commands::subsample(&cfg, cloud.as_deref(), *n1),
        Command::Train => commands::train(&cfg),
        Command::Finetune => commands::finetune(&cfg),
        Command::Infer { cloud, .. } => commands::infer(&cfg, cloud, cfg.inference),
        Command::Eval => commands::eval(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "message": msg } }));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", serde_json::json!({ "error": { "kind": "runtime", "message": format!("{e:#}") } }));
            ExitCode::from(1)
        }
    }
}
