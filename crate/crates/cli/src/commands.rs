use std::f64::consts::PI;

use anyhow::Result;
use obstacle_core::ergodic::{
    classify_regime, coupling_decay, equilibrium_gap, kb_average_from, ls_check, penalization_rate_study,
    tightness_scan, GapStatus,
};
use obstacle_core::operators::{check_coercivity, check_t_monotone, energy_gradient_deviation};
use obstacle_core::report::{num, TrajectoryStates, TrajectorySummary};
use obstacle_core::stepper::simulate_trajectory;
use obstacle_core::{csv_string, Field, FieldProfile, Grid, OperatorSpec, ProblemSpec, StepConfig, Table};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Coupling,
    Ergodic,
    Equilibrium,
    Tightness,
    LsCheck,
    RateStudy,
    Classify,
    OpCheck,
}

/// What a command produced.
#[derive(Debug)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
    pub csv: String,
    /// Additional CSV written next to the main one, keyed by file suffix.
    pub extra_csv: Vec<(&'static str, String)>,
    pub report: Value,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Coupling => "coupling",
            Command::Ergodic => "ergodic",
            Command::Equilibrium => "equilibrium",
            Command::Tightness => "tightness",
            Command::LsCheck => "ls-check",
            Command::RateStudy => "rate-study",
            Command::Classify => "classify",
            Command::OpCheck => "op-check",
        }
    }

    pub fn run(self, config: &ExperimentConfig) -> Result<Outcome> {
        let (problem, cfg) = config.build()?;
        let seed = config.master_seed;
        match self {
            Command::Simulate => simulate(config, &problem, &cfg, seed),
            Command::Coupling => coupling(config, &problem, &cfg, seed),
            Command::Ergodic => ergodic(config, &problem, &cfg, seed),
            Command::Equilibrium => equilibrium(config, &problem, &cfg, seed),
            Command::Tightness => tightness(config, &problem, &cfg, seed),
            Command::LsCheck => lewy(config, &problem, &cfg, seed),
            Command::RateStudy => rate(config, &problem, &cfg, seed),
            Command::Classify => classify(config, &problem),
            Command::OpCheck => op_check(config, &problem, seed),
        }
    }
}

fn outcome(passed: bool, summary: String, table: &dyn Table, report: impl Serialize) -> Result<Outcome> {
    Ok(Outcome { passed, summary, csv: csv_string(table), extra_csv: Vec::new(), report: serde_json::to_value(report)? })
}

fn profile(problem: &ProblemSpec, p: &FieldProfile) -> Result<Field> {
    Ok(p.resolve(problem.grid, &problem.operator, Some(&problem.psi))?)
}

fn simulate(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let s = &config.simulate;
    let tr = simulate_trajectory(problem, cfg, s.horizon, s.trajectory_id, seed, s.thinning)?;
    let summary = TrajectorySummary { trajectory: &tr, psi: &problem.psi, p: problem.operator.p };
    let finite = tr.states.iter().all(|u| u.check_finite().is_ok());
    let last = tr.states.last().expect("initial state is always recorded");
    let min_gap = last.sub(&problem.psi)?.min_value();
    let text = format!(
        "{} recorded states, {} newton iterations, final ‖u‖_H {}, final min(u - ψ) {}",
        tr.times.len(),
        tr.newton_iters,
        sci(last.norm_h()),
        sci(min_gap)
    );
    let report = json!({
        "trajectory_id": tr.trajectory_id,
        "newton_iters": tr.newton_iters,
        "recorded_states": tr.times.len(),
        "final_norm_h": last.norm_h(),
        "final_min_gap": min_gap,
    });
    let mut out = outcome(finite, text, &summary, report)?;
    if s.write_states {
        out.extra_csv.push(("states", csv_string(&TrajectoryStates(&tr))));
    }
    Ok(out)
}

fn coupling(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let c = &config.coupling;
    let (x, y) = (profile(problem, &c.x)?, profile(problem, &c.y)?);
    let fit = coupling_decay(problem, cfg, &x, &y, c.horizon, c.n_paths, seed)?;
    let rate_ok = fit.fitted_exponent.is_none_or(|e| e <= fit.theoretical_exponent + c.exponent_slack);
    let passed = fit.within_bound() && rate_ok;
    let text = format!(
        "within bound {}, fitted exponent {}, bound exponent {}",
        fit.within_bound(),
        fit.fitted_exponent.map_or("none".into(), sci),
        sci(fit.theoretical_exponent)
    );
    outcome(passed, text, &fit, &fit)
}

fn ergodic(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let e = &config.ergodic;
    let initial = e.initial.iter().map(|p| profile(problem, p)).collect::<Result<Vec<_>>>()?;
    let est = kb_average_from(problem, cfg, &e.functional, &initial, e.horizon, e.burn_in, e.n_paths, seed)?;
    let mut passed = true;
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..initial.len() {
        for j in i + 1..initial.len() {
            let (diff, se) = est.agreement(i, j);
            let scale = est.per_initial[i].mean.abs().max(est.per_initial[j].mean.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            passed &= diff <= e.max_stderr * se && rel <= e.max_relative;
            worst = (worst.0.max(diff / se.max(f64::MIN_POSITIVE)), worst.1.max(rel));
        }
    }
    let text = format!(
        "kb average {} ± {}, worst pairwise gap {} joint stderr, worst relative gap {}",
        sci(est.kb_average),
        sci(est.stderr),
        sci(worst.0),
        sci(worst.1)
    );
    outcome(passed, text, &est, &est)
}

fn equilibrium(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let q = &config.equilibrium;
    let x = profile(problem, &q.x)?;
    let gap = equilibrium_gap(problem, cfg, &q.functional, &x, &q.times, q.n_paths, seed)?;
    let passed = match gap.status {
        GapStatus::Fitted => gap.fitted_exponent.is_some_and(|e| e <= gap.theoretical_exponent + q.exponent_slack),
        GapStatus::SignalBelowNoise => gap.within_noise_after(q.noise_after),
    };
    let text = format!(
        "status {:?}, fitted exponent {}, bound exponent {}",
        gap.status,
        gap.fitted_exponent.map_or("none".into(), sci),
        sci(gap.theoretical_exponent)
    );
    outcome(passed, text, &gap, &gap)
}

fn tightness(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let t = &config.tightness;
    let scan = tightness_scan(problem, cfg, &t.horizons, t.burn_in, t.n_paths, seed)?;
    let spread = scan.spread();
    let text = format!("spread {} (limit {})", sci(spread), sci(t.max_spread));
    outcome(spread <= t.max_spread, text, &scan, &scan)
}

fn lewy(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let l = &config.ls_check;
    let tol = match l.tol {
        Some(tol) => tol,
        None => l.tol_fraction * problem.compatibility()?.h_minus.sup_norm(),
    };
    let r = ls_check(problem, cfg, l.horizon, l.n_paths, seed, tol)?;
    let text = format!(
        "lower violation {}, upper violation {}, max -k {}, tol {}",
        sci(r.max_violation_lower),
        sci(r.max_violation_upper),
        sci(r.max_reaction),
        sci(tol)
    );
    outcome(r.pass, text, &r, &r)
}

fn rate(config: &ExperimentConfig, problem: &ProblemSpec, cfg: &StepConfig, seed: u64) -> Result<Outcome> {
    let r = &config.rate_study;
    let study = penalization_rate_study(problem, cfg, &r.epsilons, r.horizon, r.n_paths, seed)?;
    let passed = study.fitted_slope.is_some_and(|s| s >= r.min_slope) && study.strictly_decreasing();
    let text = format!(
        "fitted slope {}, theoretical {}, strictly decreasing {}",
        study.fitted_slope.map_or("none".into(), sci),
        sci(study.theoretical_slope),
        study.strictly_decreasing()
    );
    outcome(passed, text, &study, &study)
}

fn classify(config: &ExperimentConfig, problem: &ProblemSpec) -> Result<Outcome> {
    let c = &config.classify;
    let r = classify_regime(problem, c.delta)?;
    let passed = c.expect_existence.is_none_or(|e| e == r.existence)
        && c.expect_uniqueness.is_none_or(|u| u == r.uniqueness);
    let text = format!("{:?}, existence {:?}, uniqueness {}", r.p_case, r.existence, r.uniqueness);
    outcome(passed, text, &r, &r)
}

struct OpCheckTable(Vec<OpCheckRow>);

#[derive(Serialize)]
struct OpCheckRow {
    p: f64,
    kappa: f64,
    t_monotone_slack: f64,
    coercivity_slack: f64,
    gradient_deviation: f64,
}

impl Table for OpCheckTable {
    fn header(&self) -> Vec<String> {
        ["p", "kappa", "t_monotone_slack", "coercivity_slack", "gradient_deviation"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.0
            .iter()
            .map(|r| {
                [r.p, r.kappa, r.t_monotone_slack, r.coercivity_slack, r.gradient_deviation]
                    .map(num)
                    .to_vec()
            })
            .collect()
    }
}

/// Deterministic five-mode sine field.
fn smooth_field(grid: Grid, index: usize) -> Field {
    let coef: Vec<f64> = (0..5).map(|a| (1.7 * (5 * index + a) as f64 + 0.3).sin()).collect();
    let dim = grid.dim();
    Field::from_fn(grid, |x| {
        (0..5)
            .map(|a| coef[a] * x[..dim].iter().map(|&c| ((a + 1) as f64 * PI * c).sin()).product::<f64>())
            .sum()
    })
}

fn op_check(config: &ExperimentConfig, problem: &ProblemSpec, seed: u64) -> Result<Outcome> {
    let o = &config.op_check;
    let grid = problem.grid;
    let mut rows = Vec::new();
    let mut field = 0;
    for (i, &p) in o.exponents.iter().enumerate() {
        for (j, &kappa) in o.kappas.iter().enumerate() {
            let spec = OperatorSpec::new(p, kappa);
            let s = seed.wrapping_add((i * o.kappas.len() + j) as u64);
            let t = check_t_monotone(&spec, grid, o.trials, s)?;
            let c = check_coercivity(&spec, grid, o.trials, s)?;
            let mut grad = 0.0f64;
            for _ in 0..o.gradient_fields {
                grad = grad.max(energy_gradient_deviation(&spec, &smooth_field(grid, field), o.gradient_step)?);
                field += 1;
            }
            rows.push(OpCheckRow {
                p,
                kappa,
                t_monotone_slack: t.min_slack,
                coercivity_slack: c.min_slack,
                gradient_deviation: grad,
            });
        }
    }
    let worst_t = rows.iter().map(|r| r.t_monotone_slack).fold(f64::INFINITY, f64::min);
    let worst_c = rows.iter().map(|r| r.coercivity_slack).fold(f64::INFINITY, f64::min);
    let worst_g = rows.iter().map(|r| r.gradient_deviation).fold(0.0, f64::max);
    let passed = worst_t >= -o.slack_tol && worst_c >= -o.slack_tol && worst_g <= o.gradient_tol;
    let text = format!(
        "worst T-monotone slack {}, worst coercivity slack {}, worst gradient deviation {}",
        sci(worst_t),
        sci(worst_c),
        sci(worst_g)
    );
    let table = OpCheckTable(rows);
    let report = serde_json::to_value(&table.0)?;
    outcome(passed, text, &table, report)
}

fn sci(x: f64) -> String {
    format!("{x:.4e}")
}
