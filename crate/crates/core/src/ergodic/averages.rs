use serde::{Deserialize, Serialize};

use super::stats::{linear_fit, shifted_mean, MeanEstimate};
use super::{check_paths, per_path, Functional};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::problem::ProblemSpec;
use crate::stepper::{run_path, steps_for, Scheme, StepConfig, Stepper};

/// Time averages from one initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub path_values: Vec<f64>,
}

/// Krylov–Bogoliubov averages `(1/(T-b)) ∫_b^T φ(u_s) ds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicEstimate {
    pub functional: Functional,
    pub horizon: f64,
    pub burn_in: f64,
    /// Mean over all paths of all initial conditions.
    pub kb_average: f64,
    pub stderr: f64,
    pub per_initial: Vec<InitialEstimate>,
    pub n_paths: usize,
    pub master_seed: u64,
}

impl ErgodicEstimate {
    /// `(|mean_i - mean_j|, sqrt(se_i² + se_j²))`.
    pub fn agreement(&self, i: usize, j: usize) -> (f64, f64) {
        let (a, b) = (&self.per_initial[i], &self.per_initial[j]);
        ((a.mean - b.mean).abs(), a.stderr.hypot(b.stderr))
    }
}

fn window(horizon: f64, burn_in: f64, dt: f64) -> Result<(usize, usize)> {
    if !(burn_in >= 0.0) || !(burn_in < horizon) {
        return Err(Error::InvalidWindow { burn_in, horizon });
    }
    Ok((steps_for(burn_in, dt)?, steps_for(horizon, dt)?))
}

/// [`kb_average_from`] started at the problem's own initial datum.
pub fn kb_average(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    functional: &Functional,
    horizon: f64,
    burn_in: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ErgodicEstimate> {
    kb_average_from(problem, cfg, functional, std::slice::from_ref(&problem.u0), horizon, burn_in, n_paths, seed)
}

/// Time averages over `[burn_in, horizon]` for `n_paths` paths from each
/// initial condition. Initial condition `j` uses trajectory ids
/// `j·n_paths .. (j+1)·n_paths`, so different initial conditions see
/// independent noise.
#[allow(clippy::too_many_arguments)]
pub fn kb_average_from(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    functional: &Functional,
    initial: &[Field],
    horizon: f64,
    burn_in: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ErgodicEstimate> {
    check_paths(n_paths)?;
    if initial.is_empty() {
        return Err(Error::InvalidParameter("no initial conditions".into()));
    }
    let (b, n) = window(horizon, burn_in, cfg.dt)?;
    let phi = functional.resolved(&problem.psi);
    let stepper = Stepper::new(problem, *cfg)?;
    let psi = &problem.psi;
    let mut per_initial = Vec::with_capacity(initial.len());
    let mut all = Vec::with_capacity(initial.len() * n_paths);
    for (j, u0) in initial.iter().enumerate() {
        let values = per_path(n_paths, |i| {
            let mut series = Vec::with_capacity(n - b);
            run_path(&stepper, Scheme::Penalized, u0, n, (j * n_paths + i) as u64, seed, |k, _, u, _| {
                if k > b {
                    series.push(phi.evaluate(u, psi));
                }
                Ok(())
            })?;
            Ok(shifted_mean(&series))
        })?;
        let est = MeanEstimate::of(&values);
        all.extend_from_slice(&values);
        per_initial.push(InitialEstimate { mean: est.mean, stderr: est.stderr, path_values: values });
    }
    let overall = MeanEstimate::of(&all);
    Ok(ErgodicEstimate {
        functional: phi,
        horizon,
        burn_in,
        kb_average: overall.mean,
        stderr: overall.stderr,
        per_initial,
        n_paths,
        master_seed: seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapStatus {
    Fitted,
    SignalBelowNoise,
}

/// `|P_tφ(x) - μ̂(φ)|` over a list of times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumGap {
    pub functional: Functional,
    pub times: Vec<f64>,
    /// Monte Carlo estimates of `P_tφ(x)`.
    pub transition: Vec<f64>,
    pub transition_stderr: Vec<f64>,
    /// Long-run average standing in for `∫φ dμ`.
    pub mu_hat: f64,
    pub mu_stderr: f64,
    pub gap: Vec<f64>,
    /// `sqrt(se_t² + se_μ²)`.
    pub gap_stderr: Vec<f64>,
    pub above_noise: Vec<bool>,
    pub status: GapStatus,
    pub fitted_exponent: Option<f64>,
    /// `L_G/2 + λ_T`.
    pub theoretical_exponent: f64,
    pub reference_burn_in: f64,
    pub reference_horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

impl EquilibriumGap {
    /// Whether the gap stays within three standard errors from `t0` on.
    pub fn within_noise_after(&self, t0: f64) -> bool {
        self.times
            .iter()
            .zip(self.gap.iter().zip(&self.gap_stderr))
            .filter(|(t, _)| **t >= t0)
            .all(|(_, (g, s))| *g <= 3.0 * s)
    }
}

pub const REFERENCE_BATCHES: usize = 20;

/// Tabulates the distance of `P_tφ(x)` to a long-run estimate of `∫φ dμ`
/// and fits its exponential decay over the times where it exceeds three
/// standard errors. The reference run uses trajectory id `n_paths`, starts
/// at `x`, discards `max(times)` and averages over `10·max(times)`.
#[allow(clippy::too_many_arguments)]
pub fn equilibrium_gap(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    functional: &Functional,
    x: &Field,
    times: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<EquilibriumGap> {
    check_paths(n_paths)?;
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("times must be nonempty and strictly increasing".into()));
    }
    let idx: Vec<usize> = times.iter().map(|&t| steps_for(t, cfg.dt)).collect::<Result<_>>()?;
    let t_max = *times.last().expect("nonempty");
    if !(t_max > 0.0) {
        return Err(Error::InvalidWindow { burn_in: t_max, horizon: 11.0 * t_max });
    }
    let last = *idx.last().expect("nonempty");
    let phi = functional.resolved(&problem.psi);
    let psi = &problem.psi;
    let stepper = Stepper::new(problem, *cfg)?;

    let samples = per_path(n_paths, |i| {
        let mut out = Vec::with_capacity(idx.len());
        let mut next = 0;
        run_path(&stepper, Scheme::Penalized, x, last, i as u64, seed, |k, _, u, _| {
            while next < idx.len() && idx[next] == k {
                out.push(phi.evaluate(u, psi));
                next += 1;
            }
            Ok(())
        })?;
        Ok(out)
    })?;

    let ref_burn = last;
    let ref_total = 11 * last;
    let mut series = Vec::with_capacity(ref_total - ref_burn);
    run_path(&stepper, Scheme::Penalized, x, ref_total, n_paths as u64, seed, |k, _, u, _| {
        if k > ref_burn {
            series.push(phi.evaluate(u, psi));
        }
        Ok(())
    })?;
    let mu = MeanEstimate::batch_means(&series, REFERENCE_BATCHES);

    let mut transition = Vec::with_capacity(times.len());
    let mut transition_stderr = Vec::with_capacity(times.len());
    let mut gap = Vec::with_capacity(times.len());
    let mut gap_stderr = Vec::with_capacity(times.len());
    let mut above_noise = Vec::with_capacity(times.len());
    let mut column = vec![0.0; n_paths];
    for j in 0..times.len() {
        for (c, s) in column.iter_mut().zip(&samples) {
            *c = s[j];
        }
        let est = MeanEstimate::of(&column);
        let g = (est.mean - mu.mean).abs();
        let se = est.stderr.hypot(mu.stderr);
        transition.push(est.mean);
        transition_stderr.push(est.stderr);
        gap.push(g);
        gap_stderr.push(se);
        above_noise.push(g > 3.0 * se);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&gap)
        .zip(&above_noise)
        .filter(|(_, above)| **above)
        .map(|((t, g), _)| (*t, g.ln()))
        .unzip();
    let fit = linear_fit(&xs, &ys);
    Ok(EquilibriumGap {
        functional: phi,
        times: times.to_vec(),
        transition,
        transition_stderr,
        mu_hat: mu.mean,
        mu_stderr: mu.stderr,
        gap,
        gap_stderr,
        above_noise,
        status: if fit.is_some() { GapStatus::Fitted } else { GapStatus::SignalBelowNoise },
        fitted_exponent: fit.map(|f| f.slope),
        theoretical_exponent: problem.noise.l_g() / 2.0 - (problem.operator.kappa + problem.operator.gamma),
        reference_burn_in: ref_burn as f64 * cfg.dt,
        reference_horizon: ref_total as f64 * cfg.dt,
        n_paths,
        master_seed: seed,
    })
}

/// Running averages `(1/(t-b)) ∫_b^t E‖u_s‖_V^p ds` at increasing horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessScan {
    pub horizons: Vec<f64>,
    pub burn_in: f64,
    pub running_average: Vec<f64>,
    pub stderr: Vec<f64>,
    pub p: f64,
    pub n_paths: usize,
    pub master_seed: u64,
}

impl TightnessScan {
    /// Largest ratio between two of the running averages.
    pub fn spread(&self) -> f64 {
        let max = self.running_average.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.running_average.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}

pub fn tightness_scan(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    horizons: &[f64],
    burn_in: f64,
    n_paths: usize,
    seed: u64,
) -> Result<TightnessScan> {
    check_paths(n_paths)?;
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("horizons must be nonempty and strictly increasing".into()));
    }
    let b = window(horizons[0], burn_in, cfg.dt)?.0;
    let idx: Vec<usize> = horizons.iter().map(|&t| steps_for(t, cfg.dt)).collect::<Result<_>>()?;
    let last = *idx.last().expect("nonempty");
    let p = problem.operator.p;
    let stepper = Stepper::new(problem, *cfg)?;
    let samples = per_path(n_paths, |i| {
        let mut out = Vec::with_capacity(idx.len());
        let mut sum = 0.0;
        let mut next = 0;
        run_path(&stepper, Scheme::Penalized, &problem.u0, last, i as u64, seed, |k, _, u, _| {
            if k > b {
                sum += u.norm_vp_pow(p)?;
            }
            if next < idx.len() && idx[next] == k {
                out.push(sum / (k - b) as f64);
                next += 1;
            }
            Ok(())
        })?;
        Ok(out)
    })?;
    let mut running_average = Vec::with_capacity(idx.len());
    let mut stderr = Vec::with_capacity(idx.len());
    for j in 0..idx.len() {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let est = MeanEstimate::of(&col);
        running_average.push(est.mean);
        stderr.push(est.stderr);
    }
    Ok(TightnessScan {
        horizons: horizons.to_vec(),
        burn_in,
        running_average,
        stderr,
        p,
        n_paths,
        master_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ergodic::FunctionalKind;
    use crate::noise::NoiseSpec;
    use crate::presets::preset;

    fn norm() -> Functional {
        Functional::new(FunctionalKind::ClippedHNorm)
    }

    #[test]
    fn stationary_average_is_exact() {
        let (problem, cfg) = preset("stationary").unwrap().build().unwrap();
        let est = kb_average(&problem, &cfg, &norm(), 1.0, 0.5, 3, 1).unwrap();
        let expected = problem.psi.norm_h().min(Functional::default_bound(&problem.psi));
        assert!(est.per_initial[0].path_values.iter().all(|&v| v == expected));
        assert_eq!(est.kb_average, expected);
    }

    #[test]
    fn window_validation() {
        let (problem, cfg) = preset("stationary").unwrap().build().unwrap();
        assert!(matches!(
            kb_average(&problem, &cfg, &norm(), 1.0, 1.0, 1, 1),
            Err(Error::InvalidWindow { .. })
        ));
        assert!(kb_average(&problem, &cfg, &norm(), 1.0, 0.5, 0, 1).is_err());
    }

    #[test]
    fn scaled_functional_scales_gap_table() {
        let (problem, cfg) = preset("example-p2-unique").unwrap().build().unwrap();
        let times = [0.0, 0.1, 0.2, 0.5];
        let a = equilibrium_gap(&problem, &cfg, &norm(), &problem.u0, &times, 8, 5).unwrap();
        let b = equilibrium_gap(&problem, &cfg, &norm().scaled(2.0), &problem.u0, &times, 8, 5).unwrap();
        for (x, y) in a.gap.iter().zip(&b.gap) {
            assert_eq!(2.0 * x, *y);
        }
        assert_eq!(a.status, b.status);
    }

    #[test]
    fn restart_at_equilibrium_stays_within_noise() {
        let (problem, cfg) = preset("example-p2-unique").unwrap().build().unwrap();
        let stepper = Stepper::new(&problem, cfg).unwrap();
        let mut state = problem.u0.clone();
        run_path(&stepper, Scheme::Penalized, &problem.u0, 500, 999, 2, |_, _, u, _| {
            state = u.clone();
            Ok(())
        })
        .unwrap();
        let times = [0.0, 0.25, 0.5, 1.0];
        let r = equilibrium_gap(&problem, &cfg, &norm(), &state, &times, 32, 2).unwrap();
        assert!(r.within_noise_after(0.0), "{:?} vs {:?}", r.gap, r.gap_stderr);
    }

    #[test]
    fn deterministic_dissipation_decreases_running_average() {
        let (mut problem, cfg) = preset("example-p3").unwrap().build().unwrap();
        problem.noise = NoiseSpec::scalar(0.0);
        problem.operator.kappa = 1.0;
        problem.u0 = problem.u0.scale(3.0);
        let scan = tightness_scan(&problem, &cfg, &[0.5, 1.0, 2.0, 4.0], 0.0, 1, 0).unwrap();
        assert!(scan.running_average.windows(2).all(|w| w[1] < w[0]));
    }
}
