use serde::{Deserialize, Serialize};

use super::{check_paths, per_path};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::stepper::{run_path, steps_for, Scheme, StepConfig, Stepper};

/// Discrete check of `0 ≤ -k ≤ h⁻` over all paths, steps and nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsReport {
    /// `max k`; the lower bound holds when this is at most `tol`.
    pub max_violation_lower: f64,
    /// `max((-k) - h⁻) / (1 + ‖h⁻‖_∞)`.
    pub max_violation_upper: f64,
    pub max_reaction: f64,
    pub h_minus_sup: f64,
    pub tol: f64,
    pub pass: bool,
    pub epsilon: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

pub fn ls_check(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    tol: f64,
) -> Result<LsReport> {
    check_paths(n_paths)?;
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("tol = {tol} must be nonnegative")));
    }
    let steps = steps_for(horizon, cfg.dt)?;
    let h_minus = problem.compatibility()?.h_minus;
    let h_sup = h_minus.sup_norm();
    let stepper = Stepper::new(problem, *cfg)?;
    let per = per_path(n_paths, |i| {
        let (mut lower, mut upper, mut reaction) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64);
        run_path(&stepper, Scheme::Penalized, &problem.u0, steps, i as u64, seed, |k, _, _, m| {
            if k == 0 {
                return Ok(());
            }
            for (&ki, &hi) in m.values().iter().zip(h_minus.values()) {
                lower = lower.max(ki);
                upper = upper.max(-ki - hi);
                reaction = reaction.max(-ki);
            }
            Ok(())
        })?;
        Ok((lower, upper, reaction))
    })?;
    let lower = per.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let upper = per.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max) / (1.0 + h_sup);
    let reaction = per.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(LsReport {
        max_violation_lower: lower,
        max_violation_upper: upper,
        max_reaction: reaction,
        h_minus_sup: h_sup,
        tol,
        pass: lower <= tol && upper <= tol,
        epsilon: cfg.epsilon,
        horizon,
        n_paths,
        master_seed: seed,
    })
}
