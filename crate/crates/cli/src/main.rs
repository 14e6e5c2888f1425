use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ddkl::experiment::{check_config, run_experiment, run_oracle, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "ddkl", version, about = "Distributed deep Koopman learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over the config and DDKL_OUT_DIR.
    #[arg(long, global = true, env = "DDKL_OUT_DIR")]
    out: Option<PathBuf>,
    /// Stops after this many batches.
    #[arg(long, global = true)]
    max_batches: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate, train and write metrics, models, manifest and plot scripts.
    Run { config: PathBuf },
    /// Audit a config: observation ranks, batch length, graph connectivity.
    Check { config: PathBuf },
    /// Run reference oracle suites: recursive-ls, gradient, stacked-solve or all.
    Oracle { suite: String },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let (cfg, text) = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let overrides = Overrides { seed: cli.seed, out: cli.out, max_batches: cli.max_batches };
            let outcome = run_experiment(cfg, &text, &overrides)?;
            for path in &outcome.artifacts {
                log::debug!("wrote {}", path.display());
            }
            println!("wrote {} artifacts to {}", outcome.artifacts.len(), outcome.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { config } => {
            let (cfg, _) = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let report = check_config(&cfg)?;
            print!("{report}");
            Ok(if report.has_failures() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Oracle { suite } => {
            let reports = run_oracle(&suite, cli.seed.unwrap_or(0))?;
            for r in &reports {
                println!("{r}");
            }
            Ok(if reports.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
