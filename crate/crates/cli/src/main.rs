use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use obstacle_cli::{exit_code, write_artifacts, Command, ExperimentConfig, EXIT_ASSERTION, EXIT_VALIDATION};

/// Stochastic obstacle problem experiments.
#[derive(Debug, Parser)]
#[command(name = "obstacle", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `scenario` with a named preset.
    #[arg(long)]
    preset: Option<String>,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::from_preset(name),
        (None, None) => anyhow::bail!("either --config or --preset is required"),
    };
    if let Some(name) = &cli.preset {
        config.scenario = obstacle_cli::config::ScenarioRef::Preset(name.clone());
    }
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate().context("invalid configuration")?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    let command = cli.command;
    let result = command.run(&config).and_then(|outcome| {
        let files = write_artifacts(command, &config, &outcome)?;
        Ok((outcome, files))
    });
    match result {
        Ok((outcome, files)) => {
            let verdict = if outcome.passed { "PASS" } else { "FAIL" };
            println!("[{verdict}] {}: {}", command.name(), outcome.summary);
            println!("wrote {} and {}", files.csv.display(), files.json.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ASSERTION)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
