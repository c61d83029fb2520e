//! Command-line entry point: reproducible experiment pipelines over the
//! library. Exit codes: 0 success, 2 validation failure, 3 numerical
//! failure during training.

use clap::{Args, Parser, Subcommand};
use dpsm::run::{
    self, cmd_eval, cmd_gen_data, cmd_theory, cmd_train, read_config, EvalRunConfig,
    GenDataConfig, TheoryCmd, TrainRunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dpsm", version, about = "Conformal prediction and conformal training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory; fixed filenames are written under it.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture dataset CSV.
    GenData {
        /// Optional JSON config; defaults to the desk-scale benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model (CE, ConfTr, CUT, or DPSM per config).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Calibrate and evaluate a trained checkpoint over repeated trials.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Numerical theory reports.
    Theory {
        #[command(subcommand)]
        sub: TheorySub,
    },
}

#[derive(Subcommand)]
enum TheorySub {
    /// Exact and asymptotic batch-quantile PMF tables.
    Pmf {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        s: usize,
        #[arg(long)]
        alpha: f64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Quantile-error scaling curves for the SA and descent routes.
    Scaling {
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 400)]
        trials: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Holderian error bound reports on random score sets.
    Heb {
        #[arg(long, default_value_t = 100)]
        m: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Empirical score-spacing constants (bi-Lipschitz diagnostic).
    Bilipschitz {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Synthetic sample size when no checkpoint is given.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Soft set size against target coverage for a trained checkpoint.
    Softcurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn real_main() -> dpsm::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, common } => {
            let mut cfg: GenDataConfig = match config {
                Some(path) => read_config(&path)?,
                None => GenDataConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cmd_gen_data(&cfg, &common.out)
        }
        Command::Train { config, common } => {
            let mut cfg: TrainRunConfig = read_config(&config)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            cmd_train(&cfg, &common.out)
        }
        Command::Eval { config, common } => {
            let mut cfg: EvalRunConfig = read_config(&config)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cmd_eval(&cfg, &common.out)
        }
        Command::Theory { sub } => {
            let (cmd, common) = match sub {
                TheorySub::Pmf { n, s, alpha, common } => (TheoryCmd::Pmf { n, s, alpha }, common),
                TheorySub::Scaling { alpha, trials, common } => {
                    (TheoryCmd::Scaling { alpha, trials }, common)
                }
                TheorySub::Heb {
                    m,
                    alpha,
                    instances,
                    common,
                } => (TheoryCmd::Heb { m, alpha, instances }, common),
                TheorySub::Bilipschitz {
                    checkpoint,
                    dataset,
                    n,
                    common,
                } => (
                    TheoryCmd::Bilipschitz {
                        checkpoint,
                        dataset,
                        n,
                    },
                    common,
                ),
                TheorySub::Softcurve {
                    checkpoint,
                    dataset,
                    tau,
                    common,
                } => (
                    TheoryCmd::SoftCurve {
                        checkpoint,
                        dataset,
                        tau,
                    },
                    common,
                ),
            };
            cmd_theory(&cmd, common.seed.unwrap_or(0), &common.out)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::from(run::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code_for(&e) as u8)
        }
    }
}
