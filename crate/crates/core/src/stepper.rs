//! Drift-implicit, noise-explicit time stepping of the penalized problem
//!
//! ```text
//! v + dt [A(v) + γv - (1/ε) ((v - ψ)⁻)^{q̃-1}] = u_n + dt f + G(max(u_n, ψ)) ΔW
//! ```
//!
//! and of the exact discrete variational inequality used as the `ε → 0`
//! reference. Under the step-size margin the left-hand map is the gradient of
//! a strictly convex functional, so each step has a unique solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::linalg::BandedSym;
use crate::noise::{sample_increment, NoiseIncrement, NoiseOperator, StreamKey};
use crate::operators::{add_jacobian, add_secant_matrix, apply_a, energy, check_penalty_params, penalty_force, penalty_value, OperatorSpec};
use crate::problem::{check_above_obstacle, ProblemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub dt: f64,
    pub epsilon: f64,
    /// `min(p, 2)` of the operator.
    pub q_tilde: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iters")]
    pub newton_max_iters: usize,
    /// Smoothing of the penalty derivative at the kink when `q̃ < 2`.
    #[serde(default = "default_pen_reg")]
    pub pen_reg: f64,
}

fn default_newton_tol() -> f64 {
    1e-10
}

fn default_newton_max_iters() -> usize {
    50
}

fn default_pen_reg() -> f64 {
    1e-10
}

impl StepConfig {
    pub fn new(op: &OperatorSpec, dt: f64, epsilon: f64) -> Self {
        Self {
            dt,
            epsilon,
            q_tilde: op.q_tilde(),
            newton_tol: default_newton_tol(),
            newton_max_iters: default_newton_max_iters(),
            pen_reg: default_pen_reg(),
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// `dt (max(0,-κ) + max(0,-γ))`, which must stay below one.
    pub fn monotonicity_margin(&self, op: &OperatorSpec) -> f64 {
        self.dt * ((-op.kappa).max(0.0) + (-op.gamma).max(0.0))
    }

    pub fn validate(&self, op: &OperatorSpec) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidDt(self.dt));
        }
        check_penalty_params(self.epsilon, self.q_tilde)?;
        if self.q_tilde != op.q_tilde() {
            return Err(Error::InvalidStepConfig(format!(
                "q_tilde = {} but min(p, 2) = {}",
                self.q_tilde,
                op.q_tilde()
            )));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::InvalidStepConfig("newton_tol must be > 0".into()));
        }
        if self.newton_max_iters == 0 {
            return Err(Error::InvalidStepConfig("newton_max_iters must be >= 1".into()));
        }
        if !(self.pen_reg >= 0.0) {
            return Err(Error::InvalidStepConfig("pen_reg must be >= 0".into()));
        }
        let margin = self.monotonicity_margin(op);
        if margin >= 1.0 {
            return Err(Error::MonotonicityMarginViolated { margin });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub u_next: Field,
    /// Penalty multiplier `k_ε` at the new time level.
    pub multiplier: Field,
    pub newton_iters: usize,
    pub residual: f64,
}

/// Which discrete problem a path is integrated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Penalized,
    /// The exact variational inequality, `ε → 0`.
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViSolver {
    ProjectedGaussSeidel,
    SemismoothNewton,
}

const MAX_PGS_SWEEPS: usize = 2_000_000;

/// A problem bound to a step configuration.
#[derive(Clone, Debug)]
pub struct Stepper<'a> {
    ops: OperatorSpec,
    noise: NoiseOperator,
    cfg: StepConfig,
    psi: &'a Field,
    f: &'a Field,
    grid: Grid,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a ProblemSpec, cfg: StepConfig) -> Result<Self> {
        problem.validate()?;
        Self::from_parts(problem.operator, NoiseOperator::new(problem.noise, problem.grid)?, cfg, &problem.psi, &problem.f)
    }

    pub fn from_parts(
        ops: OperatorSpec,
        noise: NoiseOperator,
        cfg: StepConfig,
        psi: &'a Field,
        f: &'a Field,
    ) -> Result<Self> {
        ops.validate()?;
        cfg.validate(&ops)?;
        psi.same_grid(f)?;
        Ok(Self { ops, noise, cfg, psi, f, grid: *psi.grid() })
    }

    pub fn config(&self) -> &StepConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &OperatorSpec {
        &self.ops
    }

    pub fn noise(&self) -> &NoiseOperator {
        &self.noise
    }

    pub fn psi(&self) -> &Field {
        self.psi
    }

    /// `G(max(u_n, ψ)) ΔW`.
    pub fn noise_term(&self, u_n: &Field, inc: &NoiseIncrement) -> Result<Field> {
        self.noise.apply(u_n, self.psi, inc)
    }

    fn rhs(&self, u_n: &Field, noise_term: &Field) -> Result<Field> {
        let dt = self.cfg.dt;
        let mut b = u_n.add(noise_term)?;
        for (bi, fi) in b.values_mut().iter_mut().zip(self.f.values()) {
            *bi += dt * fi;
        }
        Ok(b)
    }

    /// `v + dt (A(v) + γv) - b`, without the penalty.
    fn drift_residual(&self, v: &Field, b: &Field) -> Result<Field> {
        let dt = self.cfg.dt;
        let av = apply_a(&self.ops, v)?;
        let vals = v
            .values()
            .iter()
            .zip(av.values())
            .zip(b.values())
            .map(|((&vi, &ai), &bi)| vi + dt * (ai + self.ops.gamma * vi) - bi)
            .collect();
        Field::from_values(self.grid, vals)
    }

    fn penalized_residual(&self, v: &Field, b: &Field) -> Result<Field> {
        let dt = self.cfg.dt;
        let mut r = self.drift_residual(v, b)?;
        for ((ri, &vi), &pi) in r.values_mut().iter_mut().zip(v.values()).zip(self.psi.values()) {
            *ri += dt * penalty_value(pi - vi, self.cfg.epsilon, self.cfg.q_tilde);
        }
        Ok(r)
    }

    /// `I + dt (∂A + γ)` at `v`.
    fn drift_jacobian(&self, v: &Field) -> BandedSym {
        let mut jac = BandedSym::zeros(self.grid.dof(), self.grid.bandwidth());
        add_jacobian(&self.ops, v, self.cfg.dt, &mut jac);
        jac.add_diagonal(1.0 + self.cfg.dt * self.ops.gamma);
        jac
    }

    fn secant_matrix(&self, v: &Field) -> BandedSym {
        let mut m = BandedSym::zeros(self.grid.dof(), self.grid.bandwidth());
        add_secant_matrix(&self.ops, v, self.cfg.dt, &mut m);
        m.add_diagonal(1.0 + self.cfg.dt * self.ops.gamma);
        m
    }

    /// One step of the penalized scheme with the given increment.
    pub fn step(&self, u_n: &Field, inc: &NoiseIncrement) -> Result<StepResult> {
        let noise_term = self.noise_term(u_n, inc)?;
        self.step_with_noise(u_n, &noise_term)
    }

    pub fn step_with_noise(&self, u_n: &Field, noise_term: &Field) -> Result<StepResult> {
        let b = self.rhs(u_n, noise_term)?;
        let (u_next, newton_iters, residual) = self.solve_penalized(&b, u_n)?;
        let multiplier = self.multiplier(&u_next)?;
        Ok(StepResult { u_next, multiplier, newton_iters, residual })
    }

    pub fn multiplier(&self, u_next: &Field) -> Result<Field> {
        extract_multiplier(&self.cfg, self.psi, u_next)
    }

    /// Convex functional whose nodal gradient is the penalized residual.
    fn merit(&self, v: &Field, b: &Field) -> f64 {
        let cfg = &self.cfg;
        let q = cfg.q_tilde;
        let mut s = cfg.dt * energy(&self.ops, v) / self.grid.cell_volume();
        for ((&vi, &bi), &pi) in v.values().iter().zip(b.values()).zip(self.psi.values()) {
            let gap = (pi - vi).max(0.0);
            s += 0.5 * (1.0 + cfg.dt * self.ops.gamma) * vi * vi - bi * vi
                + cfg.dt * gap.powf(q) / (q * cfg.epsilon);
        }
        s
    }

    /// Solves `M d = -r` with `M` the drift matrix at `v` plus the penalty
    /// weights. With `secant` the flux and penalty derivatives are replaced
    /// by their secant slopes.
    fn direction(&self, v: &Field, r: &Field, secant: bool) -> Option<Vec<f64>> {
        let cfg = &self.cfg;
        let q = cfg.q_tilde;
        let mut m = if secant { self.secant_matrix(v) } else { self.drift_jacobian(v) };
        for (i, (&vi, &pi)) in v.values().iter().zip(self.psi.values()).enumerate() {
            let gap = pi - vi;
            if gap > 0.0 {
                let w = if q == 2.0 {
                    1.0
                } else if secant {
                    (gap + cfg.pen_reg).powf(q - 2.0)
                } else {
                    (q - 1.0) * (gap + cfg.pen_reg).powf(q - 2.0)
                };
                m.add(i, i, cfg.dt * w / cfg.epsilon);
            }
        }
        let ldl = m.factor()?;
        let mut d: Vec<f64> = r.values().iter().map(|x| -x).collect();
        ldl.solve_in_place(&mut d);
        Some(d)
    }

    fn shifted(&self, v: &Field, d: &[f64], t: f64) -> Option<Field> {
        Field::from_values(self.grid, v.values().iter().zip(d).map(|(a, b)| a + t * b).collect()).ok()
    }

    /// Solves the penalized system. With a singular flux (`p < 2`) the
    /// primal iteration goes first and hands over to [`Self::solve_dual`]
    /// once the merit functional stops resolving progress; otherwise the
    /// dual iteration goes first. Either falls back on the other.
    fn solve_penalized(&self, b: &Field, guess: &Field) -> Result<(Field, usize, f64)> {
        let primal_first = self.ops.p < 2.0;
        let first = if primal_first { self.solve_primal(b, guess) } else { self.solve_dual(b, guess) };
        match first {
            Err(e) if e.is_solver_failure() => {
                let second = if primal_first { self.solve_dual(b, guess) } else { self.solve_primal(b, guess) };
                second.map(|(v, k, r)| (v, k + self.cfg.newton_max_iters, r)).map_err(|_| e)
            }
            other => other,
        }
    }

    /// Damped semismooth Newton globalised by an Armijo search on the convex
    /// merit functional. In the singular range `p < 2` the Newton step can
    /// flip the sign of an edge difference without progress, so the secant
    /// (majorization) step is also tried and the better of the two kept.
    /// Iteration stops once the correction falls below floating point
    /// resolution.
    fn solve_primal(&self, b: &Field, guess: &Field) -> Result<(Field, usize, f64)> {
        let cfg = &self.cfg;
        let singular = cfg.q_tilde < 2.0;
        let mut v = guess.clone();
        let mut r = self.penalized_residual(&v, b)?;
        let mut res = r.sup_norm();
        let mut iters = 0;
        while res > cfg.newton_tol {
            if iters == cfg.newton_max_iters {
                return Err(Error::NewtonDiverged { iters, residual: res });
            }
            iters += 1;
            let fail = Error::NewtonDiverged { iters, residual: res };
            let newton = self.direction(&v, &r, false).ok_or(fail)?;
            let scale = v.sup_norm().max(1.0);
            let tiny = |d: &[f64], t: f64| d.iter().all(|x| (t * x).abs() <= 4.0 * f64::EPSILON * scale);
            if tiny(&newton, 1.0) {
                break;
            }
            let merit0 = self.merit(&v, b);
            let norm0 = l2(r.values());
            let accept = |trial: &Field, slope: f64, t: f64| -> Option<(Field, f64)> {
                let rt = self.penalized_residual(trial, b).ok()?;
                let m = self.merit(trial, b);
                let roundoff = m - merit0 <= 1e-13 * merit0.abs().max(1.0);
                let ok = m <= merit0 + 1e-4 * t * slope
                    || (roundoff && l2(rt.values()) <= (1.0 - 1e-4 * t) * norm0);
                ok.then_some((rt, m))
            };
            let slope_of = |d: &[f64]| -> f64 { r.values().iter().zip(d).map(|(a, x)| a * x).sum() };
            let mut best: Option<(Field, Field, f64)> = None;
            let mut candidates = vec![newton];
            if singular {
                if let Some(d) = self.direction(&v, &r, true) {
                    candidates.push(d);
                }
            }
            for d in &candidates {
                if let Some(trial) = self.shifted(&v, d, 1.0) {
                    if let Some((rt, m)) = accept(&trial, slope_of(d), 1.0) {
                        if best.as_ref().is_none_or(|b| m < b.2) {
                            best = Some((trial, rt, m));
                        }
                    }
                }
            }
            if best.is_none() {
                let d = candidates.last().expect("at least the Newton direction");
                let slope = slope_of(d);
                let mut t = 0.5;
                while best.is_none() {
                    if tiny(d, t) {
                        return Ok((v, iters, res));
                    }
                    if let Some(trial) = self.shifted(&v, d, t) {
                        if let Some((rt, m)) = accept(&trial, slope, t) {
                            best = Some((trial, rt, m));
                        }
                    }
                    t *= 0.5;
                }
            }
            let (nv, nr, m) = best.expect("set above");
            v = nv;
            r = nr;
            res = r.sup_norm();
            if singular && res > cfg.newton_tol && (m - merit0).abs() <= 1e-13 * merit0.abs().max(1.0) {
                return self.solve_dual(b, &v).map(|(v, k, r)| (v, iters + k, r));
            }
        }
        Ok((v, iters, res))
    }

    /// Semismooth Newton on the pair `(v, μ)` with `μ = dt (ψ - v)⁺^{q̃-1}/ε`
    /// written as
    ///
    /// ```text
    /// v + dt (A(v) + γv) - b - μ = 0,   min(μ, v - ψ + φ(μ)) = 0,   φ(μ) = (εμ/dt)^{1/(q̃-1)}
    /// ```
    ///
    /// `φ` is smooth at zero where the primal penalty `(ψ - v)^{q̃-1}` is not,
    /// so the iteration does not stall at free boundary nodes whose gap is
    /// many orders below the penalty scale. For `q̃ = 2` this is a
    /// primal-dual active set iteration. Globalised by backtracking on the
    /// Euclidean norm of both residual blocks.
    fn solve_dual(&self, b: &Field, guess: &Field) -> Result<(Field, usize, f64)> {
        let cfg = &self.cfg;
        let e = 1.0 / (cfg.q_tilde - 1.0);
        let c = cfg.epsilon / cfg.dt;
        let linear = cfg.q_tilde == 2.0;
        let phi = |m: f64| if linear { c * m } else if m > 0.0 { (c * m).powf(e) } else { 0.0 };
        let dphi = |m: f64| if linear { c } else if m > 0.0 { e * c * (c * m).powf(e - 1.0) } else { 0.0 };
        let psi = self.psi.values();
        let n = psi.len();
        // (F1, a, min(μ, a)) at a pair
        let eval = |v: &Field, mu: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let r = self.drift_residual(v, b)?;
            let f1: Vec<f64> = r.values().iter().zip(mu).map(|(ri, m)| ri - m).collect();
            let a: Vec<f64> = (0..n).map(|i| v.values()[i] - psi[i] + phi(mu[i])).collect();
            let f2: Vec<f64> = (0..n).map(|i| mu[i].min(a[i])).collect();
            Ok((f1, a, f2))
        };
        let norm = |f1: &[f64], f2: &[f64]| (l2(f1).powi(2) + l2(f2).powi(2)).sqrt();
        let mut v = guess.clone();
        let mut mu: Vec<f64> = v
            .values()
            .iter()
            .zip(psi)
            .map(|(&vi, &pi)| -cfg.dt * penalty_value(pi - vi, cfg.epsilon, cfg.q_tilde))
            .collect();
        let (mut f1, mut a, mut f2) = eval(&v, &mu)?;
        for iter in 0..=cfg.newton_max_iters {
            let res = f1.iter().fold(0.0f64, |s, x| s.max(x.abs()));
            let resolved = (0..n)
                .all(|i| f2[i].abs() <= 8.0 * f64::EPSILON * v.values()[i].abs().max(psi[i].abs()).max(1.0));
            if res <= cfg.newton_tol && resolved {
                return Ok((v, iter, res));
            }
            if iter == cfg.newton_max_iters {
                return Err(Error::NewtonDiverged { iters: iter, residual: res });
            }
            let active: Vec<bool> = (0..n).map(|i| a[i] < mu[i]).collect();
            let direction = |base: BandedSym| -> Option<(Vec<f64>, Vec<f64>)> {
                let mut m = base.clone();
                let mut dv: Vec<f64> = f1.iter().map(|x| -x).collect();
                let mut fixed = vec![false; n];
                let mut fixed_dv = vec![0.0; n];
                for i in 0..n {
                    if active[i] {
                        let w = 1.0 / dphi(mu[i]);
                        if w.is_finite() {
                            m.add(i, i, w);
                            dv[i] -= a[i] * w;
                        } else {
                            fixed[i] = true;
                            fixed_dv[i] = -a[i];
                        }
                    } else {
                        dv[i] -= mu[i];
                    }
                }
                m.eliminate(&fixed, &fixed_dv, &mut dv);
                m.factor()?.solve_in_place(&mut dv);
                let md = base.mul_vec(&dv);
                let dmu = (0..n)
                    .map(|i| {
                        if fixed[i] {
                            md[i] + f1[i]
                        } else if active[i] {
                            -(a[i] + dv[i]) / dphi(mu[i])
                        } else {
                            -mu[i]
                        }
                    })
                    .collect();
                Some((dv, dmu))
            };
            let fail = || Error::NewtonDiverged { iters: iter + 1, residual: res };
            let mut candidates = vec![direction(self.drift_jacobian(&v)).ok_or_else(fail)?];
            if self.ops.p < 2.0 {
                candidates.extend(direction(self.secant_matrix(&v)));
            }
            let norm0 = norm(&f1, &f2);
            let scale = v.sup_norm().max(1.0);
            let mut t = 1.0;
            'search: loop {
                if t < 1.0
                    && candidates
                        .iter()
                        .all(|(dv, _)| dv.iter().all(|x| (t * x).abs() <= 4.0 * f64::EPSILON * scale))
                {
                    return Ok((v, iter + 1, res));
                }
                let mut best: Option<(f64, Field, Vec<f64>, (Vec<f64>, Vec<f64>, Vec<f64>))> = None;
                for (dv, dmu) in &candidates {
                    if let Some(trial) = self.shifted(&v, dv, t) {
                        let mu_t: Vec<f64> = mu.iter().zip(dmu).map(|(m, d)| m + t * d).collect();
                        let ev = eval(&trial, &mu_t)?;
                        let nt = norm(&ev.0, &ev.2);
                        if nt <= (1.0 - 1e-4 * t) * norm0 && best.as_ref().is_none_or(|b| nt < b.0) {
                            best = Some((nt, trial, mu_t, ev));
                        }
                    }
                }
                if let Some((_, trial, mu_t, (g1, b2, g2))) = best {
                    (v, mu, f1, a, f2) = (trial, mu_t, g1, b2, g2);
                    break 'search;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return Err(fail());
                }
            }
        }
        unreachable!("loop returns on its last iteration")
    }

    /// One step of the exact discrete variational inequality with the noise
    /// term evaluated at `u_n`.
    pub fn reference_step(&self, u_n: &Field, inc: &NoiseIncrement, solver: ViSolver) -> Result<Field> {
        let noise_term = self.noise_term(u_n, inc)?;
        self.reference_step_with_noise(u_n, &noise_term, solver)
    }

    pub fn reference_step_with_noise(
        &self,
        u_n: &Field,
        noise_term: &Field,
        solver: ViSolver,
    ) -> Result<Field> {
        let b = self.rhs(u_n, noise_term)?;
        match solver {
            ViSolver::ProjectedGaussSeidel => self.solve_vi_pgs(&b, u_n),
            ViSolver::SemismoothNewton => self.solve_vi_newton(&b, u_n),
        }
    }

    /// The default reference solver: projected Gauss–Seidel for the linear
    /// case `p = 2`, semismooth Newton otherwise.
    pub fn default_vi_solver(&self) -> ViSolver {
        if self.ops.p == 2.0 {
            ViSolver::ProjectedGaussSeidel
        } else {
            ViSolver::SemismoothNewton
        }
    }

    /// Reaction `k = -(v + dt(A v + γ v) - b)/dt` of the reference step.
    pub fn reference_multiplier(&self, u_n: &Field, noise_term: &Field, v: &Field) -> Result<Field> {
        let b = self.rhs(u_n, noise_term)?;
        Ok(self.drift_residual(v, &b)?.scale(-1.0 / self.cfg.dt))
    }

    /// `max_i |min(v_i - ψ_i, F_i(v))|` for the drift residual `F`.
    pub fn complementarity(&self, v: &Field, u_n: &Field, noise_term: &Field) -> Result<f64> {
        let b = self.rhs(u_n, noise_term)?;
        let r = self.drift_residual(v, &b)?;
        Ok(complementarity_measure(v, self.psi, &r))
    }

    fn solve_vi_pgs(&self, b: &Field, guess: &Field) -> Result<Field> {
        if self.ops.p != 2.0 {
            return Err(Error::InvalidParameter("projected Gauss-Seidel needs p = 2".into()));
        }
        let m = self.drift_jacobian(guess);
        let psi = self.psi.values();
        let bv = b.values();
        let mut v: Vec<f64> = guess.values().iter().zip(psi).map(|(a, p)| a.max(*p)).collect();
        let n = v.len();
        let mut measure = f64::INFINITY;
        for sweep in 0..MAX_PGS_SWEEPS {
            for i in 0..n {
                let s = m.row_off_diagonal_dot(i, &v);
                v[i] = ((bv[i] - s) / m.get(i, i)).max(psi[i]);
            }
            if sweep % 8 == 7 {
                let mv = m.mul_vec(&v);
                measure = (0..n)
                    .map(|i| (v[i] - psi[i]).min(mv[i] - bv[i]).abs())
                    .fold(0.0, f64::max);
                if measure <= self.cfg.newton_tol {
                    return Field::from_values(self.grid, v);
                }
            }
        }
        Err(Error::VISolverStalled { iters: MAX_PGS_SWEEPS, residual: measure })
    }

    /// Primal–dual active set (semismooth Newton) on `min(v - ψ, F(v)) = 0`.
    fn solve_vi_newton(&self, b: &Field, guess: &Field) -> Result<Field> {
        let max_iters = self.cfg.newton_max_iters.max(100);
        let mut v = guess.zip_map(self.psi, f64::max)?;
        let mut r = self.drift_residual(&v, b)?;
        let phi = |v: &Field, r: &Field| -> Vec<f64> {
            v.values()
                .iter()
                .zip(self.psi.values())
                .zip(r.values())
                .map(|((&vi, &pi), &ri)| (vi - pi).min(ri))
                .collect()
        };
        let mut ph = phi(&v, &r);
        for iter in 0..=max_iters {
            let measure = ph.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if measure <= self.cfg.newton_tol {
                return Ok(v);
            }
            if iter == max_iters {
                return Err(Error::VISolverStalled { iters: iter, residual: measure });
            }
            let active: Vec<bool> = v
                .values()
                .iter()
                .zip(self.psi.values())
                .zip(r.values())
                .map(|((&vi, &pi), &ri)| vi - pi <= ri)
                .collect();
            let fixed: Vec<f64> = v.values().iter().zip(self.psi.values()).map(|(a, p)| p - a).collect();
            let mut rhs: Vec<f64> = r.values().iter().map(|x| -x).collect();
            let mut jac = self.drift_jacobian(&v);
            jac.eliminate(&active, &fixed, &mut rhs);
            let ldl = jac
                .factor()
                .ok_or(Error::VISolverStalled { iters: iter, residual: measure })?;
            ldl.solve_in_place(&mut rhs);
            let norm0 = l2(&ph);
            let mut t = 1.0;
            loop {
                let trial = Field::from_values(
                    self.grid,
                    v.values().iter().zip(&rhs).map(|(a, d)| a + t * d).collect(),
                );
                if let Ok(trial) = trial {
                    let rt = self.drift_residual(&trial, b)?;
                    let pt = phi(&trial, &rt);
                    if l2(&pt) <= (1.0 - 1e-4 * t) * norm0 || t < 1e-12 {
                        v = trial;
                        r = rt;
                        ph = pt;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    return Err(Error::VISolverStalled { iters: iter, residual: measure });
                }
            }
        }
        unreachable!("loop returns on its last iteration")
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn complementarity_measure(v: &Field, psi: &Field, r: &Field) -> f64 {
    v.values()
        .iter()
        .zip(psi.values())
        .zip(r.values())
        .map(|((&vi, &pi), &ri)| (vi - pi).min(ri).abs())
        .fold(0.0, f64::max)
}

/// One penalized step for explicit data; see [`Stepper`] for repeated use.
pub fn semi_implicit_step(
    ops: &OperatorSpec,
    noise: &crate::noise::NoiseSpec,
    cfg: &StepConfig,
    psi: &Field,
    f: &Field,
    u_n: &Field,
    inc: &NoiseIncrement,
) -> Result<StepResult> {
    let stepper = Stepper::from_parts(*ops, NoiseOperator::new(*noise, *psi.grid())?, *cfg, psi, f)?;
    stepper.step(u_n, inc)
}

/// `k_ε = -(1/ε) max(0, ψ - u)^{q̃-1}`.
pub fn extract_multiplier(cfg: &StepConfig, psi: &Field, u_next: &Field) -> Result<Field> {
    penalty_force(u_next, psi, cfg.epsilon, cfg.q_tilde)
}

/// One step of the exact variational inequality with a prescribed noise term.
pub fn vi_reference_step(
    ops: &OperatorSpec,
    cfg: &StepConfig,
    psi: &Field,
    f: &Field,
    u_n: &Field,
    noise_term: &Field,
) -> Result<Field> {
    let zero = crate::noise::NoiseSpec::scalar(0.0);
    let stepper = Stepper::from_parts(*ops, NoiseOperator::new(zero, *psi.grid())?, *cfg, psi, f)?;
    stepper.reference_step_with_noise(u_n, noise_term, stepper.default_vi_solver())
}

/// Number of steps `N` with `N dt = horizon`.
pub fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidHorizon { horizon, dt });
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidHorizon { horizon, dt });
    }
    Ok(n as usize)
}

/// One member of a coupled ensemble: a stepper, the scheme it integrates
/// and its initial state.
#[derive(Clone, Copy, Debug)]
pub struct Member<'s, 'a> {
    pub stepper: &'s Stepper<'a>,
    pub scheme: Scheme,
    pub u0: &'s Field,
}

/// Integrates several members driven by the same Wiener increments for
/// `steps` steps. `observe(step, t, states, multipliers)` sees the initial
/// states (with zero multipliers) and the states after every step.
/// Increments come from the stream keyed by `(seed, trajectory, step)`.
/// Returns the total number of Newton iterations.
pub fn run_coupled(
    members: &[Member<'_, '_>],
    steps: usize,
    trajectory: u64,
    seed: u64,
    mut observe: impl FnMut(usize, f64, &[Field], &[Field]) -> Result<()>,
) -> Result<usize> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let dt = first.stepper.cfg.dt;
    let spec = *first.stepper.noise.spec();
    for m in members {
        if m.stepper.cfg.dt != dt || *m.stepper.noise.spec() != spec {
            return Err(Error::InvalidParameter("coupled members need equal dt and noise".into()));
        }
        check_above_obstacle(m.u0, m.stepper.psi)?;
    }
    let mut states: Vec<Field> = members.iter().map(|m| m.u0.clone()).collect();
    let mut mults: Vec<Field> = states.iter().map(|u| Field::zeros(*u.grid())).collect();
    observe(0, 0.0, &states, &mults)?;
    let mut newton_total = 0;
    for k in 0..steps {
        let fail = |e: Error| Error::StepFailed { step: k + 1, source: Box::new(e) };
        let inc = sample_increment(&spec, dt, StreamKey::new(seed, trajectory, k as u64)).map_err(fail)?;
        for (j, m) in members.iter().enumerate() {
            let st = m.stepper;
            let u = &states[j];
            let noise_term = st.noise_term(u, &inc).map_err(fail)?;
            let (next, mult) = match m.scheme {
                Scheme::Penalized => {
                    let res = st.step_with_noise(u, &noise_term).map_err(fail)?;
                    newton_total += res.newton_iters;
                    (res.u_next, res.multiplier)
                }
                Scheme::Reference => {
                    let v = st
                        .reference_step_with_noise(u, &noise_term, st.default_vi_solver())
                        .map_err(fail)?;
                    let km = st.reference_multiplier(u, &noise_term, &v).map_err(fail)?;
                    (v, km)
                }
            };
            states[j] = next;
            mults[j] = mult;
        }
        observe(k + 1, (k + 1) as f64 * dt, &states, &mults)?;
    }
    Ok(newton_total)
}

/// Single-member form of [`run_coupled`].
pub fn run_path(
    stepper: &Stepper<'_>,
    scheme: Scheme,
    u0: &Field,
    steps: usize,
    trajectory: u64,
    seed: u64,
    mut observe: impl FnMut(usize, f64, &Field, &Field) -> Result<()>,
) -> Result<usize> {
    let member = Member { stepper, scheme, u0 };
    run_coupled(&[member], steps, trajectory, seed, |k, t, u, m| observe(k, t, &u[0], &m[0]))
}

/// A recorded path.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Field>,
    pub multipliers: Vec<Field>,
    pub trajectory_id: u64,
    pub master_seed: u64,
    pub newton_iters: usize,
}

/// Integrates the penalized scheme to `horizon`, keeping every
/// `thinning`-th state (the initial state is always kept).
pub fn simulate_trajectory(
    problem: &ProblemSpec,
    cfg: &StepConfig,
    horizon: f64,
    trajectory_id: u64,
    master_seed: u64,
    thinning: usize,
) -> Result<Trajectory> {
    let stepper = Stepper::new(problem, *cfg)?;
    let steps = steps_for(horizon, cfg.dt)?;
    let thin = thinning.max(1);
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut multipliers = Vec::new();
    let newton_iters = run_path(
        &stepper,
        Scheme::Penalized,
        &problem.u0,
        steps,
        trajectory_id,
        master_seed,
        |k, t, u, m| {
            if k % thin == 0 {
                times.push(t);
                states.push(u.clone());
                multipliers.push(m.clone());
            }
            Ok(())
        },
    )?;
    Ok(Trajectory { times, states, multipliers, trajectory_id, master_seed, newton_iters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_dof(psi: f64) -> (OperatorSpec, Field, Field, Field) {
        let g = Grid::new(1, 1).unwrap();
        (OperatorSpec::new(2.0, 0.0), Field::constant(g, psi), Field::zeros(g), Field::constant(g, 1.0))
    }

    #[test]
    fn unconstrained_one_dof_example() {
        let (ops, psi, f, u) = one_dof(-10.0);
        let cfg = StepConfig::new(&ops, 0.1, 1e-3);
        let noise = NoiseSpec::scalar(1.0);
        let r = semi_implicit_step(&ops, &noise, &cfg, &psi, &f, &u, &NoiseIncrement::zero(&noise, 0.1))
            .unwrap();
        assert!((r.u_next.values()[0] - 1.0 / 1.8).abs() < 1e-12);
        assert!(r.multiplier.sup_norm() == 0.0);
    }

    #[test]
    fn constrained_one_dof_example() {
        let (ops, psi, f, u) = one_dof(0.8);
        let cfg = StepConfig::new(&ops, 0.1, 1e-6);
        let noise = NoiseSpec::scalar(1.0);
        let zero = NoiseIncrement::zero(&noise, 0.1);
        let r = semi_implicit_step(&ops, &noise, &cfg, &psi, &f, &u, &zero).unwrap();
        assert!((r.u_next.values()[0] - 0.8).abs() < 1e-4);
        let v = vi_reference_step(&ops, &cfg, &psi, &f, &u, &Field::zeros(*u.grid())).unwrap();
        assert_eq!(v.values()[0], 0.8);
        // closed form of the penalized scalar equation: v + 0.8 v + 0.1 (v - 0.8)/ε = 1
        let eps = 1e-6;
        let closed = (1.0 + 0.1 * 0.8 / eps) / (1.8 + 0.1 / eps);
        assert!((r.u_next.values()[0] - closed).abs() < 1e-12);
    }

    fn stationary() -> (OperatorSpec, Field, Field) {
        let g = Grid::new(1, 32).unwrap();
        let ops = OperatorSpec::new(3.0, 0.5).with_gamma(0.2);
        let psi = Field::from_fn(g, |x| 0.5 * (std::f64::consts::PI * x[0]).sin());
        let mut f = apply_a(&ops, &psi).unwrap();
        for (fi, p) in f.values_mut().iter_mut().zip(psi.values()) {
            *fi += 0.2 * p;
        }
        (ops, psi, f)
    }

    #[test]
    fn stationary_point_is_exact() {
        let (ops, psi, f) = stationary();
        let cfg = StepConfig::new(&ops, 0.01, 1e-4);
        let noise = NoiseSpec::scalar(1.0);
        let inc = NoiseIncrement { dt: 0.01, betas: vec![0.3] };
        let r = semi_implicit_step(&ops, &noise, &cfg, &psi, &f, &psi, &inc).unwrap();
        assert!(r.u_next.sub(&psi).unwrap().sup_norm() < 1e-12);
        assert!(r.multiplier.sup_norm() == 0.0);
        assert!(r.newton_iters <= 2);
    }

    fn random_instance(n: usize, seed: u64) -> (Field, Field, Field, Field) {
        let g = Grid::new(1, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |a: f64| -> Field {
            Field::from_values(g, (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
        };
        let psi = draw(0.5);
        let f = draw(20.0);
        let u = psi.add(&draw(0.5).map(f64::abs)).unwrap();
        let noise_term = draw(0.05);
        (psi, f, u, noise_term)
    }

    #[test]
    fn penalized_matches_vi_for_tiny_epsilon() {
        for seed in 0..5 {
            let (psi, f, u, nt) = random_instance(16, seed);
            let ops = OperatorSpec::new(2.0, 0.0);
            let cfg = StepConfig::new(&ops, 0.01, 1e-8);
            let stepper =
                Stepper::from_parts(ops, NoiseOperator::new(NoiseSpec::scalar(0.0), *psi.grid()).unwrap(), cfg, &psi, &f)
                    .unwrap();
            let pen = stepper.step_with_noise(&u, &nt).unwrap();
            let vi = stepper.reference_step_with_noise(&u, &nt, ViSolver::ProjectedGaussSeidel).unwrap();
            let diff = pen.u_next.sub(&vi).unwrap().sup_norm();
            assert!(diff <= 1e-5, "seed {seed}: {diff}");
            assert!(vi.sub(&psi).unwrap().min_value() >= 0.0);
            assert!(stepper.complementarity(&vi, &u, &nt).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn vi_solvers_agree() {
        for seed in 0..5 {
            let (psi, f, u, nt) = random_instance(20, 100 + seed);
            let ops = OperatorSpec::new(2.0, 1.0);
            let cfg = StepConfig::new(&ops, 0.01, 1e-4);
            let stepper =
                Stepper::from_parts(ops, NoiseOperator::new(NoiseSpec::scalar(0.0), *psi.grid()).unwrap(), cfg, &psi, &f)
                    .unwrap();
            let a = stepper.reference_step_with_noise(&u, &nt, ViSolver::ProjectedGaussSeidel).unwrap();
            let b = stepper.reference_step_with_noise(&u, &nt, ViSolver::SemismoothNewton).unwrap();
            assert!(a.sub(&b).unwrap().sup_norm() < 1e-9);
        }
    }

    #[test]
    fn vi_inactive_obstacle_is_unconstrained_step() {
        let (_, f, u, nt) = random_instance(12, 7);
        let psi = Field::constant(*u.grid(), -100.0);
        for p in [2.0, 3.0, 1.5] {
            let ops = OperatorSpec::new(p, 0.3);
            let cfg = StepConfig::new(&ops, 0.01, 1e-4);
            let stepper =
                Stepper::from_parts(ops, NoiseOperator::new(NoiseSpec::scalar(0.0), *psi.grid()).unwrap(), cfg, &psi, &f)
                    .unwrap();
            let free = stepper.step_with_noise(&u, &nt).unwrap();
            assert!(free.multiplier.sup_norm() == 0.0);
            let vi = stepper.reference_step_with_noise(&u, &nt, stepper.default_vi_solver()).unwrap();
            assert!(free.u_next.sub(&vi).unwrap().sup_norm() < 1e-10, "p {p}");
        }
    }

    #[test]
    fn general_p_penalized_converges_to_vi() {
        for p in [1.5, 3.0] {
            let (psi, f, u, nt) = random_instance(16, 40);
            let ops = OperatorSpec::new(p, 0.0);
            let mut prev = f64::INFINITY;
            for eps in [1e-2, 1e-4, 1e-6] {
                let cfg = StepConfig::new(&ops, 0.01, eps);
                let stepper = Stepper::from_parts(
                    ops,
                    NoiseOperator::new(NoiseSpec::scalar(0.0), *psi.grid()).unwrap(),
                    cfg,
                    &psi,
                    &f,
                )
                .unwrap();
                let pen = stepper.step_with_noise(&u, &nt).unwrap();
                let vi = stepper.reference_step_with_noise(&u, &nt, ViSolver::SemismoothNewton).unwrap();
                let diff = pen.u_next.sub(&vi).unwrap().sup_norm();
                assert!(diff < prev, "p {p} eps {eps}: {diff} vs {prev}");
                prev = diff;
            }
            assert!(prev < 1e-3, "p {p}: {prev}");
        }
    }

    #[test]
    fn multiplier_examples() {
        let g = Grid::new(1, 3).unwrap();
        let ops = OperatorSpec::new(2.0, 0.0);
        let cfg = StepConfig::new(&ops, 0.01, 1e-3);
        let psi = Field::zeros(g);
        let above = Field::constant(g, 0.1);
        assert!(extract_multiplier(&cfg, &psi, &above).unwrap().sup_norm() == 0.0);
        let u = Field::from_values(g, vec![0.0, -1e-3, 1.0]).unwrap();
        let k = extract_multiplier(&cfg, &psi, &u).unwrap();
        assert!((k.values()[1] + 1.0).abs() < 1e-12);
        assert_eq!(k.values()[0], 0.0);
        assert!(k.values().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn comparison_principle_without_noise() {
        let g = Grid::new(1, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let psi = Field::from_fn(g, |x| 0.3 - (x[0] - 0.5).powi(2));
        let f = Field::from_fn(g, |x| -5.0 + 10.0 * x[0]);
        for p in [1.5, 2.0, 3.0] {
            let ops = OperatorSpec::new(p, -1.0).with_gamma(0.5);
            let cfg = StepConfig::new(&ops, 0.01, 1e-3);
            let zero = Field::zeros(g);
            let stepper = Stepper::from_parts(
                ops,
                NoiseOperator::new(NoiseSpec::scalar(0.0), g).unwrap(),
                cfg,
                &psi,
                &f,
            )
            .unwrap();
            for _ in 0..10 {
                let lo = psi.add(&Field::from_values(g, (0..24).map(|_| rng.random_range(0.0..0.5)).collect()).unwrap()).unwrap();
                let hi = lo.add(&Field::from_values(g, (0..24).map(|_| rng.random_range(0.0..0.5)).collect()).unwrap()).unwrap();
                let a = stepper.step_with_noise(&lo, &zero).unwrap().u_next;
                let b = stepper.step_with_noise(&hi, &zero).unwrap().u_next;
                assert!(b.sub(&a).unwrap().min_value() >= -1e-10, "p {p}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let ops = OperatorSpec::new(3.0, -50.0);
        let cfg = StepConfig::new(&ops, 0.1, 1e-3);
        assert!(matches!(cfg.validate(&ops), Err(Error::MonotonicityMarginViolated { .. })));
        let cfg = StepConfig { q_tilde: 1.5, ..StepConfig::new(&OperatorSpec::new(3.0, 0.0), 0.01, 1e-3) };
        assert!(cfg.validate(&OperatorSpec::new(3.0, 0.0)).is_err());
        assert!(StepConfig::new(&ops, -1.0, 1e-3).validate(&ops).is_err());
        assert_eq!(steps_for(1.0, 0.01).unwrap(), 100);
        assert_eq!(steps_for(0.0, 0.01).unwrap(), 0);
        assert!(steps_for(1.005, 0.01).is_err());
    }
}
