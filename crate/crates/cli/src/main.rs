use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedrel_core::harness::run::{self, EvalTarget, RunDir, TrainOptions, OUT_ENV};
use fedrel_core::harness::{ExperimentConfig, Suite};

/// Federated reliability simulator.
#[derive(Debug, Parser)]
#[command(name = "fedrel", version)]
struct Cli {
    /// Experiment config (TOML). Without it the built-in synthetic defaults are used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Run directory; falls back to the config's output_dir, then ./runs.
    #[arg(long, global = true, value_name = "DIR", env = OUT_ENV)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or load the dataset and write client partitions.
    GenData,
    /// Run federated training, checkpointing after every round.
    Train {
        /// Continue from the last completed round.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed rounds.
        #[arg(long, value_name = "ROUNDS")]
        stop_after: Option<usize>,
    },
    /// Build one head ensemble per client from the trained model.
    Aph {
        /// Use this model checkpoint as the prior instead of the trained global model.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write in-domain calibration and OOD entropy reports.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Target::All)]
        target: Target,
        /// Evaluate this model checkpoint instead of the trained global model.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Run a multi-seed experiment suite; exits non-zero if a gating check fails.
    Suite {
        /// heterogeneity_sweep, participation_sweep, epoch_sweep, quantity_sweep,
        /// aph_comparison or head_finetune_diagnostic
        name: String,
        /// Comma-separated seeds (default: five seeds starting at the root seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    All,
    Global,
    Finetune,
    Aph,
}

impl From<Target> for EvalTarget {
    fn from(t: Target) -> Self {
        match t {
            Target::All => EvalTarget::All,
            Target::Global => EvalTarget::Global,
            Target::Finetune => EvalTarget::Finetune,
            Target::Aph => EvalTarget::Aph,
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::synthetic(0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = run::resolve_out(cli.out.as_deref(), &cfg);
    let dir = RunDir::new(&out);
    match cli.command {
        Command::GenData => {
            let paths = run::gen_data(&cfg, &dir)?;
            println!("wrote {} files under {}", paths.len(), out.display());
        }
        Command::Train { resume, stop_after } => {
            let o = run::train(&cfg, &dir, TrainOptions { resume, stop_after })?;
            if let Some(last) = o.result.logs.last() {
                println!(
                    "round {}/{}: accuracy {:.4}  F-ECE {:.4}  NLL {:.4}",
                    last.round, cfg.fed.rounds, last.accuracy, last.f_ece, last.nll
                );
            }
            if !o.finished {
                println!("stopped early; continue with --resume");
            }
        }
        Command::Aph { checkpoint } => {
            let ens = run::aph(&cfg, &dir, checkpoint.as_deref())?;
            println!(
                "built {} ensembles of {} heads",
                ens.len(),
                ens.first().map_or(0, |e| e.len())
            );
        }
        Command::Evaluate { target, model } => {
            let paths = run::evaluate(&cfg, &dir, target.into(), model.as_deref())?;
            for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
                println!("{}", p.display());
            }
        }
        Command::Suite { name, seeds } => {
            let suite: Suite = name.parse()?;
            let seeds = if seeds.is_empty() {
                (cfg.seed..cfg.seed + 5).collect()
            } else {
                seeds
            };
            let (report, _) = run::run_suite(&cfg, &dir, suite, &seeds)?;
            print!("{}", report.to_table());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
