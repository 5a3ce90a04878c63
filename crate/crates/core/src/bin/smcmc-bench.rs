use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smcmc_flow::harness::{emit_outputs, format_table, preset, run_experiment, ExperimentConfig, LoadedRun, RunMetadata, PRESETS};

#[derive(Parser)]
#[command(name = "smcmc-bench", about = "Run filtering benchmarks and summarize their outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a preset name.
    Run {
        /// Path to a flat TOML config, or `preset:<name>`.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute aggregates from an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Shipped experiment presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// List preset names.
    List,
    /// Print a preset as a config file.
    Show { name: String },
}

fn run(cli: Cli) -> smcmc_flow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            trials,
            out,
            workers,
        } => {
            let mut cfg = match config.strip_prefix("preset:") {
                Some(name) => preset(name)?,
                None => ExperimentConfig::load(&PathBuf::from(&config))?,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            eprintln!("running '{}': {} trials x {} steps, {} filters", cfg.name, cfg.trials, cfg.time_steps, cfg.filters.len());
            let report = run_experiment(&cfg, workers)?;
            let summary = emit_outputs(&report, &out, &RunMetadata::current(workers))?;
            for f in report.failures() {
                eprintln!("trial {} {} failed at step {}: {}", f.trial, f.filter, f.step, f.error);
            }
            print!("{}", format_table(&summary));
            eprintln!("outputs written to {}", out.display());
        }
        Command::Report { input } => {
            let loaded = LoadedRun::load(&input)?;
            print!("{}", format_table(&loaded.recompute()?));
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                for p in PRESETS {
                    println!("{:<18} {}", p.name, p.description);
                }
            }
            PresetAction::Show { name } => print!("{}", preset(&name)?.to_toml()?),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
