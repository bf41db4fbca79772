use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use sego_kit::commands;
use sego_kit::config::ExperimentConfig;
use sego_kit::UsageError;

#[derive(Parser, Debug)]
#[command(name = "sego-kit", version, about = "Sequential subgoal optimization experiments on small environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set trainer.n_max=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (same as `--set trainer.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for chain sampling.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Warm up and run the training loop; writes metrics, checkpoint and report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write every sampled chain to chain_trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Run a check suite: lemmas, elbo, unbiasedness, oracles or all.
    Verify {
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train every ablation variant over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Render an SVG line chart from a metrics CSV.
    Plot {
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
        #[arg(long, value_name = "SVG")]
        output: PathBuf,
        /// Columns to draw; all but the first when omitted.
        #[arg(long = "column")]
        columns: Vec<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?.with_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(UsageError("--workers must be >= 1".into()).into());
        }
        // Fails only if a pool already exists; chain results do not depend on it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, trace } => {
            let cfg = load(&common)?;
            let report = commands::cmd_train(&cfg, trace)?;
            if let Some(m) = &report.metrics {
                println!(
                    "trained {} iterations: success {:.4} -> {:.4}",
                    m.iterations, m.warmed_success_rate, m.final_success_rate
                );
            }
            Ok(true)
        }
        Command::Verify { suite, common } => {
            let write = common.out.is_some();
            let cfg = load(&common)?;
            let (_, ok) = commands::cmd_verify(&cfg, &suite, write)?;
            Ok(ok)
        }
        Command::Ablate { common } => {
            let cfg = load(&common)?;
            commands::cmd_ablate(&cfg)?;
            Ok(true)
        }
        Command::Plot { input, output, columns } => {
            commands::cmd_plot(&input, &output, &columns)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEGO_KIT_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(sego_kit::exit_code(&err) as u8)
        }
    }
}
