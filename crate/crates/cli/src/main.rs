use std::path::PathBuf;
use std::process::ExitCode;

use cglb_cli::commands;
use cglb_cli::{CliError, Config};
use cglb_core::training::ModelKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cglb",
    version,
    about = "Gaussian process regression with conjugate-gradient lower bounds"
)]
struct Cli {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Exact,
    Sgpr,
    Cglb,
    Iterative,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Exact => ModelKind::Exact,
            Kind::Sgpr => ModelKind::Sgpr,
            Kind::Cglb => ModelKind::Cglb,
            Kind::Iterative => ModelKind::Iterative,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write trace, model and summary files.
    Train {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Number of inducing points.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Repeat with this many consecutive seeds, one subdirectory each.
        #[arg(long)]
        seeds: Option<usize>,
        /// Worker threads for multi-seed runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Reload a saved model and score it on the held-out split.
    Evaluate {
        /// Defaults to model.json in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Tabulate every bound against the dense reference at random hyperparameters.
    CompareBounds {
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Finite-difference check of every analytic gradient.
    CheckGradients {
        #[arg(long)]
        draws: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output.dir = o;
    }
    match cli.command {
        Command::Train {
            kind,
            m,
            max_steps,
            seeds,
            jobs,
        } => {
            if let Some(k) = kind {
                cfg.model.kind = k.into();
            }
            if let Some(m) = m {
                cfg.model.m = m;
            }
            if let Some(s) = max_steps {
                cfg.optimizer.max_steps = s;
            }
            cfg.validate()?;
            match seeds {
                Some(k) if k > 1 => print(&commands::run_train_seeds(&cfg, k, jobs)?),
                _ => print(&commands::run_train(&cfg)?),
            }
        }
        Command::Evaluate { model } => {
            cfg.validate()?;
            print(&commands::run_evaluate(&cfg, model.as_deref())?)
        }
        Command::CompareBounds { draws, m } => {
            if let Some(d) = draws {
                cfg.compare.draws = d;
            }
            if let Some(m) = m {
                cfg.model.m = m;
            }
            cfg.validate()?;
            let rows = commands::run_compare_bounds(&cfg)?;
            let bad = rows.iter().filter(|r| !r.ordering_ok).count();
            log::info!("{} rows, {} with a violated ordering", rows.len(), bad);
            println!("{}", cfg.output.dir.join(commands::BOUNDS_FILE).display());
            Ok(())
        }
        Command::CheckGradients { draws } => {
            if let Some(d) = draws {
                cfg.gradcheck.draws = d;
            }
            cfg.validate()?;
            let rows = commands::run_check_gradients(&cfg)?;
            print(&rows)?;
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            if rows.iter().any(|r| !r.pass) {
                return Err(CliError::GradientCheck(format!(
                    "largest relative error {worst:.3e} exceeds {:.1e}",
                    cfg.gradcheck.tolerance
                )));
            }
            Ok(())
        }
    }
}

fn print<T: serde::Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
