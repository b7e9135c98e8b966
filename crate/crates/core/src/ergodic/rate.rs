use serde::{Deserialize, Serialize};

use super::stats::{linear_fit, MeanEstimate};
use super::{check_paths, per_path};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::stepper::{run_coupled, steps_for, Member, Scheme, StepConfig, Stepper};

/// `E sup_{t≤T} ‖u_ε(t) - u(t)‖²_H` against the exact variational
/// inequality, with all schemes driven by the same increments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub error_stderr: Vec<f64>,
    /// Log-log slope over the points above `floor`.
    pub fitted_slope: Option<f64>,
    /// `1` for `p ≥ 2`, `1/(p-1)` below.
    pub theoretical_slope: f64,
    /// Fewer than two points above the floor.
    pub degenerate: bool,
    pub floor: f64,
    pub fit_points: usize,
    pub horizon: f64,
    pub delta_reg: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

impl RateStudy {
    pub fn strictly_decreasing(&self) -> bool {
        self.errors.windows(2).all(|w| w[1] < w[0])
    }
}

pub fn theoretical_rate(p: f64) -> f64 {
    if p >= 2.0 {
        1.0
    } else {
        1.0 / (p - 1.0)
    }
}

pub fn penalization_rate_study(
    problem: &ProblemSpec,
    cfg_base: &StepConfig,
    epsilons: &[f64],
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<RateStudy> {
    check_paths(n_paths)?;
    if epsilons.len() < 3 || epsilons.windows(2).any(|w| w[1] >= w[0]) || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidParameter(
            "need at least three positive, strictly decreasing epsilons".into(),
        ));
    }
    let steps = steps_for(horizon, cfg_base.dt)?;
    let reference = Stepper::new(problem, *cfg_base)?;
    let penalized: Vec<Stepper> = epsilons
        .iter()
        .map(|&e| Stepper::new(problem, cfg_base.with_epsilon(e)))
        .collect::<Result<_>>()?;
    let mut members = vec![Member { stepper: &reference, scheme: Scheme::Reference, u0: &problem.u0 }];
    members.extend(penalized.iter().map(|s| Member { stepper: s, scheme: Scheme::Penalized, u0: &problem.u0 }));
    let m = epsilons.len();
    let sups = per_path(n_paths, |i| {
        let mut sup = vec![0.0f64; m];
        run_coupled(&members, steps, i as u64, seed, |_, _, u, _| {
            for j in 0..m {
                sup[j] = sup[j].max(u[j + 1].sub(&u[0])?.norm_h().powi(2));
            }
            Ok(())
        })?;
        Ok(sup)
    })?;
    let mut errors = Vec::with_capacity(m);
    let mut error_stderr = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<f64> = sups.iter().map(|s| s[j]).collect();
        let est = MeanEstimate::of(&col);
        errors.push(est.mean);
        error_stderr.push(est.stderr);
    }
    let floor = 3.0 * cfg_base.newton_tol * cfg_base.newton_tol;
    let (xs, ys): (Vec<f64>, Vec<f64>) = epsilons
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e > floor)
        .map(|(eps, e)| (eps.ln(), e.ln()))
        .unzip();
    let fit = linear_fit(&xs, &ys);
    Ok(RateStudy {
        epsilons: epsilons.to_vec(),
        errors,
        error_stderr,
        fitted_slope: fit.map(|f| f.slope),
        theoretical_slope: theoretical_rate(problem.operator.p),
        degenerate: fit.is_none(),
        floor,
        fit_points: xs.len(),
        horizon,
        delta_reg: problem.operator.delta_reg,
        n_paths,
        master_seed: seed,
    })
}
