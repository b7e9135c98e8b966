use serde::{Deserialize, Serialize};

use super::stats::{linear_fit, MeanEstimate};
use super::{check_paths, feller_exponent, per_path};
use crate::error::Result;
use crate::grid::Field;
use crate::problem::ProblemSpec;
use crate::stepper::{run_coupled, steps_for, Member, Scheme, StepConfig, Stepper};

/// `E‖u(t; x) - u(t; y)‖²_H` under shared noise, with an exponential fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingFit {
    pub times: Vec<f64>,
    pub mean_sq_gap: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `e^{(L_G + 2λ_T) t} ‖x - y‖²_H`.
    pub bound: Vec<f64>,
    /// Slope of `ln E‖gap‖²` against `t`; `None` when fewer than two
    /// points lie above the solver floor.
    pub fitted_exponent: Option<f64>,
    pub theoretical_exponent: f64,
    /// 95% half-width of the fitted slope.
    pub ci_halfwidth: f64,
    pub fit_points: usize,
    /// Values at or below this are treated as solver noise.
    pub floor: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

impl CouplingFit {
    /// Whether `estimate - 2 stderr ≤ bound` at every recorded time.
    pub fn within_bound(&self) -> bool {
        self.mean_sq_gap
            .iter()
            .zip(&self.stderr)
            .zip(&self.bound)
            .all(|((m, s), b)| m - 2.0 * s <= b * (1.0 + 1e-12))
    }
}

/// Runs `n_paths` pairs of paths from `x` and `y`, each pair driven by the
/// same increments, and fits the decay of the mean squared gap.
#[allow(clippy::too_many_arguments)]
pub fn coupling_decay(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    x: &Field,
    y: &Field,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<CouplingFit> {
    check_paths(n_paths)?;
    let steps = steps_for(horizon, cfg.dt)?;
    let stepper = Stepper::new(problem, *cfg)?;
    let members = [
        Member { stepper: &stepper, scheme: Scheme::Penalized, u0: x },
        Member { stepper: &stepper, scheme: Scheme::Penalized, u0: y },
    ];
    let gaps = per_path(n_paths, |i| {
        let mut g = Vec::with_capacity(steps + 1);
        run_coupled(&members, steps, i as u64, seed, |_, _, u, _| {
            g.push(u[0].sub(&u[1])?.norm_h().powi(2));
            Ok(())
        })?;
        Ok(g)
    })?;
    let initial = x.sub(y)?.norm_h().powi(2);
    let theta = feller_exponent(&problem.operator, &problem.noise);
    let mut times = Vec::with_capacity(steps + 1);
    let mut mean_sq_gap = Vec::with_capacity(steps + 1);
    let mut stderr = Vec::with_capacity(steps + 1);
    let mut bound = Vec::with_capacity(steps + 1);
    let mut column = vec![0.0; n_paths];
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        for (c, g) in column.iter_mut().zip(&gaps) {
            *c = g[k];
        }
        let est = if k == 0 { MeanEstimate { mean: initial, stderr: 0.0, n: n_paths } } else { MeanEstimate::of(&column) };
        times.push(t);
        mean_sq_gap.push(est.mean);
        stderr.push(est.stderr);
        bound.push((theta * t).exp() * initial);
    }
    let floor = 9.0 * cfg.newton_tol * cfg.newton_tol;
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        times.iter().zip(&mean_sq_gap).filter(|(_, m)| **m > floor).map(|(t, m)| (*t, m.ln())).unzip();
    let fit = linear_fit(&xs, &ys);
    Ok(CouplingFit {
        times,
        mean_sq_gap,
        stderr,
        bound,
        fitted_exponent: fit.map(|f| f.slope),
        theoretical_exponent: theta,
        ci_halfwidth: fit.map_or(f64::NAN, |f| 1.96 * f.slope_stderr),
        fit_points: xs.len(),
        floor,
        n_paths,
        master_seed: seed,
    })
}
