//! Experiment runner behind the `obstacle` binary.

pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

pub use commands::{Command, Outcome};
pub use config::ExperimentConfig;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_SOLVER: u8 = 2;
pub const EXIT_ASSERTION: u8 = 3;

/// Exit code for an error raised while running a command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let solver = err
        .chain()
        .filter_map(|e| e.downcast_ref::<obstacle_core::Error>())
        .any(|e| e.is_solver_failure());
    if solver {
        EXIT_SOLVER
    } else {
        EXIT_VALIDATION
    }
}

/// Paths of the files written for one run.
#[derive(Debug)]
pub struct Artifacts {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub extra: Vec<PathBuf>,
}

fn stem(dir: &Path, command: &str, timestamp: &str) -> String {
    let base = format!("{command}_{timestamp}");
    let mut name = base.clone();
    let mut k = 1;
    while dir.join(format!("{name}.csv")).exists() || dir.join(format!("{name}.json")).exists() {
        name = format!("{base}_{k}");
        k += 1;
    }
    name
}

/// Writes `<command>_<timestamp>.csv` and `.json` under the output directory.
pub fn write_artifacts(command: Command, config: &ExperimentConfig, outcome: &Outcome) -> Result<Artifacts> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let timestamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ").to_string();
    let name = stem(dir, command.name(), &timestamp);
    let csv = dir.join(format!("{name}.csv"));
    fs::write(&csv, &outcome.csv)?;
    let mut extra = Vec::new();
    for (suffix, body) in &outcome.extra_csv {
        let path = dir.join(format!("{name}_{suffix}.csv"));
        fs::write(&path, body)?;
        extra.push(path);
    }
    let (problem_scenario, step) = (config.scenario()?, config.build()?.1);
    let doc = json!({
        "command": command.name(),
        "timestamp": timestamp,
        "master_seed": config.master_seed,
        "passed": outcome.passed,
        "summary": outcome.summary,
        "config": config,
        "scenario": problem_scenario,
        "step_config": step,
        "result": outcome.report,
    });
    let json = dir.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(Artifacts { csv, json, extra })
}
