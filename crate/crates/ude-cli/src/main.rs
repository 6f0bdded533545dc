//! `ude`: train and evaluate source-only, domain-adapted, and
//! knowledge-distilled domain-expanded classifiers on synthetic 2-D data.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numeric divergence,
//! 1 anything else. Set `UDE_LOG` (error/warn/info/debug) to control logging.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Stage};
use ude_core::Error;

#[derive(Parser)]
#[command(name = "ude", version, about = "Domain-expansion training lab")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's top-level seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target train/test CSVs
    Gen,
    /// Train one stage: source, da, or kdde
    Train {
        #[arg(long)]
        stage: String,
        /// Weights of the source-only teacher (kdde stage)
        #[arg(long)]
        teacher_src: Option<PathBuf>,
        /// Weights of the domain-adapted teacher (kdde stage)
        #[arg(long)]
        teacher_da: Option<PathBuf>,
    },
    /// Evaluate weights files; with both teachers, also the baselines
    Eval {
        /// Weights of the source-only member (enables baseline evaluation)
        #[arg(long)]
        teacher_src: Option<PathBuf>,
        /// Weights of the domain-adapted member (enables baseline evaluation)
        #[arg(long)]
        teacher_da: Option<PathBuf>,
        /// Weights files to evaluate
        #[arg(value_name = "WEIGHTS")]
        weights: Vec<PathBuf>,
    },
    /// Train the DA model across a lambda grid and tabulate accuracies
    SweepLambda {
        /// Comma-separated lambda values
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.1,1,10,20,100")]
        lambdas: Vec<f64>,
        /// Comma-separated seeds (default: the config seed)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export feature rows for the configured eval domains
    ExportFeatures {
        #[arg(value_name = "WEIGHTS")]
        weights: PathBuf,
    },
    /// Export the decision-boundary lattice from [eval.boundary]
    ExportBoundary {
        #[arg(value_name = "WEIGHTS")]
        weights: PathBuf,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> ude_core::Result<()> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            cfg
        }
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));

    match &cli.command {
        Command::Gen => commands::cmd_gen(&cfg, seed),
        Command::Train {
            stage,
            teacher_src,
            teacher_da,
        } => {
            let stage: Stage = stage.parse()?;
            commands::cmd_train(
                &cfg,
                stage,
                seed,
                &out_dir,
                teacher_src.as_deref(),
                teacher_da.as_deref(),
            )
        }
        Command::Eval {
            teacher_src,
            teacher_da,
            weights,
        } => commands::cmd_eval(
            &cfg,
            seed,
            &out_dir,
            weights,
            teacher_src.as_deref(),
            teacher_da.as_deref(),
        ),
        Command::SweepLambda { lambdas, seeds } => {
            let seeds = seeds.clone().unwrap_or_else(|| vec![seed]);
            commands::cmd_sweep_lambda(&cfg, &out_dir, lambdas, &seeds)
        }
        Command::ExportFeatures { weights } => {
            commands::cmd_export_features(&cfg, &out_dir, weights)
        }
        Command::ExportBoundary { weights } => {
            commands::cmd_export_boundary(&cfg, &out_dir, weights)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UDE_LOG", "info"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
