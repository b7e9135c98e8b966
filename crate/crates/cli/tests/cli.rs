use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obstacle_cli::config::ScenarioRef;
use obstacle_cli::ExperimentConfig;
use obstacle_core::{preset, FieldProfile};

fn obstacle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obstacle")).args(args).output().expect("binary runs")
}

fn artifact(dir: &Path, command: &str, ext: &str) -> PathBuf {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            name.starts_with(&format!("{command}_")) && name.ends_with(ext) && !name.contains("_states")
        })
        .collect();
    assert_eq!(found.len(), 1, "{found:?}");
    found.pop().unwrap()
}

#[test]
fn classify_certifies_uniqueness() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = obstacle(&["classify", "--preset", "example-p3-unique", "--out", out]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("[PASS] classify"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(artifact(dir.path(), "classify", ".json")).unwrap()).unwrap();
    assert_eq!(json["result"]["uniqueness"], true);
    assert_eq!(json["result"]["existence"], "ergodic-invariant");
    assert_eq!(json["master_seed"], 0);
    assert_eq!(json["config"]["scenario"], "example-p3-unique");
}

#[test]
fn stationary_simulation_has_constant_rows() {
    let dir = tempfile::tempdir().unwrap();
    let run = obstacle(&["simulate", "--preset", "stationary", "--out", dir.path().to_str().unwrap()]);
    assert!(run.status.success());
    let csv = fs::read_to_string(artifact(dir.path(), "simulate", ".csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,norm_h,norm_v_pow_p,min_gap,multiplier_sup");
    let tails: Vec<&str> = lines.map(|l| l.split_once(',').unwrap().1).collect();
    assert_eq!(tails.len(), 101);
    assert!(tails.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn repeated_runs_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "scenario = \"example-p15-unique\"\nmaster_seed = 12\n\n[coupling]\nhorizon = 0.5\nn_paths = 6\n",
    )
    .unwrap();
    let mut bodies = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let args = ["coupling", "--config", config.to_str().unwrap(), "--threads", threads, "--out", out.to_str().unwrap()];
        let run = obstacle(&args);
        assert!(run.status.code().is_some_and(|c| c == 0 || c == 3), "{}", String::from_utf8_lossy(&run.stderr));
        bodies.push(fs::read(artifact(&out, "coupling", ".csv")).unwrap());
    }
    assert!(!bodies[0].is_empty());
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn config_round_trips() {
    let mut config = ExperimentConfig::from_preset("ls-regular");
    config.master_seed = u64::MAX;
    config.step.epsilon = Some(1e-6);
    config.rate_study.epsilons = vec![0.1, 0.01, 1e-3, 1e-4];
    config.classify.expect_uniqueness = Some(true);
    config.simulate.write_states = true;
    let text = config.to_toml().unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), config);

    let mut inline = preset("example-p2-unique").unwrap();
    inline.u0 = FieldProfile::Constant { value: 0.25 };
    config.scenario = ScenarioRef::Inline(Box::new(inline));
    let text = config.to_toml().unwrap();
    let back = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(back, config);
    assert_eq!(ExperimentConfig::parse(&back.to_toml().unwrap()).unwrap(), back);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = ExperimentConfig::parse("scenario = \"example-p3\"\n[coupling]\nn_path = 3\n").unwrap_err();
    assert!(format!("{err:#}").contains("n_path"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(obstacle(&["simulate", "--preset", "nope", "--out", out]).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "scenario = \"example-p3\"\n[simulate]\nhorizon = 0.015\n").unwrap();
    let run = obstacle(&["simulate", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("simulate.horizon"));

    let starved = dir.path().join("starved.toml");
    fs::write(&starved, "scenario = \"ls-regular\"\n[step]\nepsilon = 1e-8\nnewton_max_iters = 1\n").unwrap();
    let run = obstacle(&["simulate", "--config", starved.to_str().unwrap(), "--out", out]);
    assert_eq!(run.status.code(), Some(2), "{}", String::from_utf8_lossy(&run.stderr));

    let strict = dir.path().join("strict.toml");
    fs::write(&strict, "scenario = \"example-p3\"\n[classify]\nexpect_uniqueness = true\n").unwrap();
    let run = obstacle(&["classify", "--config", strict.to_str().unwrap(), "--out", out]);
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("[FAIL] classify"));
}
