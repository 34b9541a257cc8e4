//! `astc` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use astc_cli::commands::{self, PlanRequest};
use astc_cli::config::RunConfig;
use astc_cli::{is_usage_error, UsageError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "astc", version, about = "Belief-space actor-critic with bounded tree search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test episodes with a ground-truth sidecar.
    SynthGen(Common),
    /// Normalize observations and fit the Gaussian mixture.
    FitGmm(Common),
    /// Estimate transitions, rewards and the observation channel.
    FitModel(Common),
    /// Run actor-critic training epochs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rho_max: Option<f64>,
        #[arg(long)]
        tree_expansions: Option<usize>,
        #[arg(long)]
        eps_gap: Option<f64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Replay held-out episodes and write the reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the final agent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search from one belief and print the bounds and chosen action.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Comma-separated state probabilities.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "observation")]
        belief: Option<Vec<f64>>,
        /// Comma-separated raw observation.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        observation: Option<Vec<f64>>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        /// Write the searched tree to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(c) => commands::synth_gen(&load_config(&c)?),
        Command::FitGmm(c) => commands::fit_gmm(&load_config(&c)?),
        Command::FitModel(c) => commands::fit_model(&load_config(&c)?),
        Command::Train {
            common,
            epochs,
            alpha,
            lambda,
            sigma,
            rho_max,
            tree_expansions,
            eps_gap,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            let a = &mut cfg.agent;
            if let Some(v) = epochs {
                a.epochs = v;
            }
            a.alpha = alpha.or(a.alpha);
            a.lambda = lambda.or(a.lambda);
            a.sigma = sigma.or(a.sigma);
            a.rho_max = rho_max.or(a.rho_max);
            if let Some(v) = tree_expansions {
                a.max_expansions = v;
            }
            if let Some(v) = eps_gap {
                a.eps_gap = v;
            }
            cfg.validate()?;
            commands::train(&cfg, resume.as_deref())
        }
        Command::Evaluate { common, checkpoint } => commands::evaluate(&load_config(&common)?, checkpoint.as_deref()),
        Command::Plan {
            common,
            belief,
            observation,
            model,
            checkpoint,
            budget,
            dump,
        } => {
            if belief.is_none() && observation.is_none() {
                return Err(UsageError("plan needs --belief or --observation".into()).into());
            }
            let cfg = load_config(&common)?;
            let req = PlanRequest {
                belief,
                observation,
                model,
                checkpoint,
                budget,
                dump,
            };
            let out = commands::plan(&cfg, &req).context("planning failed")?;
            print!("{out}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
