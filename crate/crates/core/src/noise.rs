//! Truncated Q-Wiener process `W(t) = Σ_k √q_k e_k β_k(t)` and the
//! multiplicative coefficient `G(u) = c (max(u, ψ) - ψ)` that vanishes on the
//! obstacle.
//!
//! Increments are drawn from a ChaCha8 stream whose 256-bit key is the triple
//! `(master seed, trajectory id, step index)`; the `k`-th normal drawn from that
//! stream is the increment of mode `k`. Any thread can therefore regenerate
//! any increment without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// One Brownian motion multiplying the whole field.
    Scalar,
    /// Sine eigenbasis with `q_k = k^{-(2+η)}`.
    MultiMode,
    /// As `MultiMode`, with the multiplicative factor clamped to `[0, clip]`.
    BoundedMultiMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Noise intensity `c`.
    pub c: f64,
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Decay rate `η` of the covariance eigenvalues.
    #[serde(default = "default_q_decay")]
    pub q_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

fn default_modes() -> usize {
    1
}

fn default_q_decay() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn scalar(c: f64) -> Self {
        Self { kind: NoiseKind::Scalar, c, modes: 1, q_decay: 1.0, clip: None }
    }

    pub fn multi_mode(c: f64, modes: usize) -> Self {
        Self { kind: NoiseKind::MultiMode, c, modes, q_decay: 1.0, clip: None }
    }

    pub fn bounded(c: f64, modes: usize, clip: f64) -> Self {
        Self { kind: NoiseKind::BoundedMultiMode, c, modes, q_decay: 1.0, clip: Some(clip) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.c.is_finite() {
            return Err(Error::InvalidNoise(format!("intensity c = {} is not finite", self.c)));
        }
        if self.modes == 0 {
            return Err(Error::InvalidNoise("need at least one mode".into()));
        }
        if !(self.q_decay > 0.0) || !self.q_decay.is_finite() {
            return Err(Error::InvalidNoise(format!("q_decay = {} must be > 0", self.q_decay)));
        }
        match self.kind {
            NoiseKind::Scalar if self.modes != 1 => {
                Err(Error::InvalidNoise("scalar noise has exactly one mode".into()))
            }
            NoiseKind::BoundedMultiMode => match self.clip {
                Some(c) if c >= 0.0 && c.is_finite() => Ok(()),
                _ => Err(Error::InvalidNoise("bounded noise needs a finite clip >= 0".into())),
            },
            _ => Ok(()),
        }
    }

    /// Covariance eigenvalue `q_k` for the 1-based mode index `k`.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        match self.kind {
            NoiseKind::Scalar => 1.0,
            _ => (k as f64).powf(-(2.0 + self.q_decay)),
        }
    }

    pub fn trace_q(&self) -> f64 {
        (1..=self.modes).map(|k| self.eigenvalue(k)).sum()
    }

    /// Lipschitz constant `L_G` of `G` into the Hilbert–Schmidt operators.
    pub fn l_g(&self) -> f64 {
        self.c * self.c * self.trace_q()
    }

    /// `‖G(0)‖²` bound; `G` vanishes at the obstacle so this is zero.
    pub fn m_const(&self) -> f64 {
        0.0
    }

    /// Uniform bound on `‖G(σ)‖²_{L₂(H₀,H)}`, finite only for bounded noise.
    pub fn kbold(&self) -> Option<f64> {
        match (self.kind, self.clip) {
            (NoiseKind::BoundedMultiMode, Some(clip)) => {
                Some(self.c * self.c * clip * clip * self.trace_q())
            }
            _ => None,
        }
    }

    /// The multiplicative factor at a node.
    #[inline]
    fn factor(&self, u: f64, psi: f64) -> f64 {
        let f = u.max(psi) - psi;
        match (self.kind, self.clip) {
            (NoiseKind::BoundedMultiMode, Some(clip)) => f.min(clip),
            _ => f,
        }
    }
}

/// Key of a counter-based random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub trajectory: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, trajectory: u64, step: u64) -> Self {
        Self { master_seed, trajectory, step }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.trajectory.to_le_bytes());
        key[16..24].copy_from_slice(&self.step.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Mode increments `Δβ_k ~ N(0, dt)` for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrement {
    pub dt: f64,
    pub betas: Vec<f64>,
}

impl NoiseIncrement {
    pub fn zero(spec: &NoiseSpec, dt: f64) -> Self {
        Self { dt, betas: vec![0.0; spec.modes] }
    }
}

pub fn sample_increment(spec: &NoiseSpec, dt: f64, key: StreamKey) -> Result<NoiseIncrement> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidDt(dt));
    }
    let mut rng = key.rng();
    let sd = dt.sqrt();
    let betas = (0..spec.modes)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    Ok(NoiseIncrement { dt, betas })
}

/// `G` specialised to a grid: the weighted basis `√q_k e_k` sampled at the
/// nodes, computed once.
#[derive(Clone, Debug)]
pub struct NoiseOperator {
    spec: NoiseSpec,
    grid: Grid,
    weighted_basis: Vec<Vec<f64>>,
}

/// Tensor mode indices in the order used for 2D grids: by `k₁² + k₂²`, then `k₁`.
pub fn tensor_modes(count: usize, n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> =
        (1..=n).flat_map(|a| (1..=n).map(move |b| (a, b))).collect();
    pairs.sort_by_key(|&(a, b)| (a * a + b * b, a));
    pairs.truncate(count);
    pairs
}

impl NoiseOperator {
    pub fn new(spec: NoiseSpec, grid: Grid) -> Result<Self> {
        spec.validate()?;
        let weighted_basis = match spec.kind {
            NoiseKind::Scalar => Vec::new(),
            _ => {
                let available = grid.dof();
                if spec.modes > available {
                    return Err(Error::InvalidNoise(format!(
                        "{} modes exceed the {} resolvable on this grid",
                        spec.modes, available
                    )));
                }
                let s2 = 2f64.sqrt();
                if grid.dim() == 1 {
                    (1..=spec.modes)
                        .map(|k| {
                            let w = spec.eigenvalue(k).sqrt();
                            (0..grid.dof())
                                .map(|i| w * s2 * (k as f64 * PI * grid.coords(i)[0]).sin())
                                .collect()
                        })
                        .collect()
                } else {
                    tensor_modes(spec.modes, grid.n())
                        .into_iter()
                        .enumerate()
                        .map(|(idx, (a, b))| {
                            let w = spec.eigenvalue(idx + 1).sqrt();
                            (0..grid.dof())
                                .map(|i| {
                                    let [x, y] = grid.coords(i);
                                    w * 2.0 * (a as f64 * PI * x).sin() * (b as f64 * PI * y).sin()
                                })
                                .collect()
                        })
                        .collect()
                }
            }
        };
        Ok(Self { spec, grid, weighted_basis })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    /// `G(u) ΔW` for the given increment.
    pub fn apply(&self, u: &Field, psi: &Field, inc: &NoiseIncrement) -> Result<Field> {
        u.same_grid(psi)?;
        if *u.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        if inc.betas.len() != self.spec.modes {
            return Err(Error::InvalidNoise(format!(
                "increment has {} modes, spec has {}",
                inc.betas.len(),
                self.spec.modes
            )));
        }
        let c = self.spec.c;
        let mut out = Field::zeros(self.grid);
        let vals = out.values_mut();
        match self.spec.kind {
            NoiseKind::Scalar => {
                let db = inc.betas[0];
                for ((o, &ui), &pi) in vals.iter_mut().zip(u.values()).zip(psi.values()) {
                    *o = c * self.spec.factor(ui, pi) * db;
                }
            }
            _ => {
                for (i, o) in vals.iter_mut().enumerate() {
                    let fac = self.spec.factor(u.values()[i], psi.values()[i]);
                    if fac == 0.0 {
                        continue;
                    }
                    let mut s = 0.0;
                    for (basis, db) in self.weighted_basis.iter().zip(&inc.betas) {
                        s += basis[i] * db;
                    }
                    *o = c * fac * s;
                }
            }
        }
        Ok(out)
    }

    /// `‖G(u)‖²_{L₂(H₀,H)} = Σ_k ‖c · factor · √q_k e_k‖²_H`.
    pub fn hilbert_schmidt_sq(&self, u: &Field, psi: &Field) -> Result<f64> {
        u.same_grid(psi)?;
        let vol = self.grid.cell_volume();
        let c2 = self.spec.c * self.spec.c;
        let fac: Vec<f64> =
            u.values().iter().zip(psi.values()).map(|(&a, &b)| self.spec.factor(a, b)).collect();
        Ok(match self.spec.kind {
            NoiseKind::Scalar => c2 * vol * fac.iter().map(|f| f * f).sum::<f64>(),
            _ => self
                .weighted_basis
                .iter()
                .map(|b| c2 * vol * b.iter().zip(&fac).map(|(e, f)| (e * f).powi(2)).sum::<f64>())
                .sum(),
        })
    }
}

/// One-shot `G(u) ΔW`; prefer [`NoiseOperator`] inside loops.
pub fn apply_g(spec: &NoiseSpec, u: &Field, psi: &Field, inc: &NoiseIncrement) -> Result<Field> {
    NoiseOperator::new(*spec, *u.grid())?.apply(u, psi, inc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub trials: usize,
    pub l_g: f64,
    /// Largest `c² tr Q ‖g(θ) - g(σ)‖²_H / ‖θ - σ‖²_H` observed.
    pub max_ratio: f64,
    pub kbold: Option<f64>,
    /// Largest `‖G(σ)‖²_{L₂(H₀,H)}` observed (bounded noise only).
    pub max_sq_norm: Option<f64>,
}

pub fn empirical_lipschitz(
    spec: &NoiseSpec,
    grid: Grid,
    psi: &Field,
    trials: usize,
    seed: u64,
) -> Result<LipschitzCheck> {
    use rand::Rng;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let op = NoiseOperator::new(*spec, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = spec.clip.unwrap_or(1.0).max(1.0) * 3.0;
    let draw = |rng: &mut ChaCha8Rng| -> Field {
        let vals = psi.values().iter().map(|p| p + rng.random_range(-amp..amp)).collect();
        Field::from_values(grid, vals).expect("finite draws")
    };
    let weight = spec.c * spec.c * spec.trace_q();
    let mut max_ratio = 0.0f64;
    let mut max_sq: Option<f64> = spec.kbold().map(|_| 0.0);
    for _ in 0..trials {
        let theta = draw(&mut rng);
        let sigma = draw(&mut rng);
        let dx = theta.sub(&sigma)?.norm_h();
        if dx == 0.0 {
            continue;
        }
        let g = |u: &Field| -> Field {
            u.zip_map(psi, |a, b| spec.factor(a, b)).expect("same grid")
        };
        let dg = g(&theta).sub(&g(&sigma))?.norm_h();
        max_ratio = max_ratio.max(weight * dg * dg / (dx * dx));
        if let Some(m) = max_sq.as_mut() {
            *m = m.max(op.hilbert_schmidt_sq(&sigma, psi)?);
        }
    }
    Ok(LipschitzCheck { trials, l_g: spec.l_g(), max_ratio, kbold: spec.kbold(), max_sq_norm: max_sq })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(n: usize) -> Grid {
        Grid::new(1, n).unwrap()
    }

    #[test]
    fn spec_invariants() {
        let s = NoiseSpec::multi_mode(0.5, 4);
        let manual: f64 = (1..=4).map(|k| (k as f64).powi(-3)).sum();
        assert!((s.trace_q() - manual).abs() < 1e-15);
        assert!((s.l_g() - 0.25 * manual).abs() < 1e-15);
        assert!(s.kbold().is_none());
        let s = NoiseSpec::scalar(2.0);
        assert_eq!(s.l_g(), 4.0);
        assert!(s.kbold().is_none());
        let s = NoiseSpec::bounded(1.0, 3, 0.5);
        assert!(s.kbold().unwrap().is_finite());
        assert!(NoiseSpec { modes: 2, ..NoiseSpec::scalar(1.0) }.validate().is_err());
        assert!(NoiseSpec { clip: None, ..NoiseSpec::bounded(1.0, 2, 1.0) }.validate().is_err());
    }

    #[test]
    fn increment_determinism_and_scaling() {
        let spec = NoiseSpec::multi_mode(1.0, 4);
        let key = StreamKey::new(7, 3, 11);
        let a = sample_increment(&spec, 0.01, key).unwrap();
        let b = sample_increment(&spec, 0.01, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.betas.len(), 4);
        let c = sample_increment(&spec, 1e-4, key).unwrap();
        for (x, y) in a.betas.iter().zip(&c.betas) {
            assert!((x / 0.1 - y / 0.01).abs() < 1e-12);
        }
        let other = sample_increment(&spec, 0.01, StreamKey::new(7, 4, 11)).unwrap();
        assert_ne!(a, other);
        assert!(matches!(sample_increment(&spec, 0.0, key), Err(Error::InvalidDt(_))));
    }

    #[test]
    fn increment_variance() {
        let spec = NoiseSpec::multi_mode(1.0, 4);
        let reps = 100_000u64;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for step in 0..reps {
            let inc = sample_increment(&spec, 1.0, StreamKey::new(1, 0, step)).unwrap();
            for k in 0..4 {
                sum[k] += inc.betas[k];
                sq[k] += inc.betas[k] * inc.betas[k];
            }
        }
        for k in 0..4 {
            let mean = sum[k] / reps as f64;
            let var = sq[k] / reps as f64 - mean * mean;
            assert!((0.99..=1.01).contains(&var), "mode {k}: {var}");
        }
    }

    #[test]
    fn increment_lag_one_autocorrelation() {
        let spec = NoiseSpec::scalar(1.0);
        let xs: Vec<f64> = (0..100_000u64)
            .map(|s| sample_increment(&spec, 1.0, StreamKey::new(9, 2, s)).unwrap().betas[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = cov / var;
        assert!(rho.abs() <= 0.02, "{rho}");
    }

    #[test]
    fn g_vanishes_on_obstacle() {
        let g = g1(6);
        let psi = Field::from_fn(g, |x| x[0] - 0.5);
        let inc = NoiseIncrement { dt: 1.0, betas: vec![0.7, -0.2, 1.1] };
        for spec in [NoiseSpec::multi_mode(1.3, 3), NoiseSpec::bounded(2.0, 3, 0.1)] {
            let out = apply_g(&spec, &psi, &psi, &inc).unwrap();
            assert!(out.values().iter().all(|&v| v == 0.0));
        }
        let below = psi.map(|v| v - 0.3);
        let out = apply_g(&NoiseSpec::multi_mode(1.0, 3), &below, &psi, &inc).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        // mixed: nodes at or below ψ contribute exactly zero
        let u = Field::from_values(g, vec![-1.0, 5.0, -1.0, 5.0, -1.0, 5.0]).unwrap();
        let out = apply_g(&NoiseSpec::multi_mode(1.0, 3), &u, &psi, &inc).unwrap();
        for (i, (&ui, &pi)) in u.values().iter().zip(psi.values()).enumerate() {
            if ui <= pi {
                assert_eq!(out.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn scalar_example() {
        let g = g1(4);
        let out = apply_g(
            &NoiseSpec::scalar(2.0),
            &Field::constant(g, 1.0),
            &Field::zeros(g),
            &NoiseIncrement { dt: 1.0, betas: vec![0.3] },
        )
        .unwrap();
        assert!(out.values().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn single_mode_example() {
        let g = g1(5);
        let spec = NoiseSpec { q_decay: 1.0, ..NoiseSpec::multi_mode(1.5, 1) };
        let u = Field::from_fn(g, |x| 1.0 + x[0]);
        let out = apply_g(&spec, &u, &Field::zeros(g), &NoiseIncrement { dt: 1.0, betas: vec![0.4] })
            .unwrap();
        for i in 0..5 {
            let x = g.coords(i)[0];
            let expected = 1.5 * (1.0 + x) * 2f64.sqrt() * (PI * x).sin() * 0.4;
            assert!((out.values()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn discrete_basis_is_orthonormal() {
        for (dim, n, m) in [(1, 8, 8), (2, 5, 12)] {
            let g = Grid::new(dim, n).unwrap();
            let spec = NoiseSpec { q_decay: 1.0, ..NoiseSpec::multi_mode(1.0, m) };
            let op = NoiseOperator::new(spec, g).unwrap();
            for (a, ba) in op.weighted_basis.iter().enumerate() {
                for (b, bb) in op.weighted_basis.iter().enumerate() {
                    let qa = spec.eigenvalue(a + 1).sqrt();
                    let qb = spec.eigenvalue(b + 1).sqrt();
                    let ip = g.cell_volume()
                        * ba.iter().zip(bb).map(|(x, y)| x * y).sum::<f64>()
                        / (qa * qb);
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((ip - expected).abs() < 1e-12, "({a},{b}) {ip}");
                }
            }
        }
    }

    #[test]
    fn too_many_modes_rejected() {
        assert!(NoiseOperator::new(NoiseSpec::multi_mode(1.0, 9), g1(8)).is_err());
    }

    #[test]
    fn scalar_lipschitz_ratio_is_c_squared_above_obstacle() {
        let g = g1(10);
        let spec = NoiseSpec::scalar(1.7);
        // θ, σ ≥ ψ = 0: the factor is the identity, ratio exactly c²
        let theta = Field::from_fn(g, |x| 1.0 + x[0]);
        let sigma = Field::from_fn(g, |x| 0.5 * x[0] * x[0]);
        let dg = theta.sub(&sigma).unwrap().norm_h();
        let psi = Field::zeros(g);
        let gt = theta.zip_map(&psi, |a, b| spec.factor(a, b)).unwrap();
        let gs = sigma.zip_map(&psi, |a, b| spec.factor(a, b)).unwrap();
        let ratio = spec.l_g() * gt.sub(&gs).unwrap().norm_h().powi(2) / (dg * dg);
        assert!((ratio - 1.7 * 1.7).abs() < 1e-12);
        let r = empirical_lipschitz(&spec, g, &psi, 500, 1).unwrap();
        assert!(r.max_ratio <= spec.l_g() * (1.0 + 1e-10));
    }

    #[test]
    fn lipschitz_and_bound_fuzz() {
        let g = g1(16);
        let psi = Field::from_fn(g, |x| 0.2 * (PI * x[0]).sin());
        for spec in [NoiseSpec::multi_mode(0.8, 6), NoiseSpec::bounded(1.2, 6, 0.4)] {
            let r = empirical_lipschitz(&spec, g, &psi, 2000, 5).unwrap();
            assert!(r.max_ratio <= r.l_g * (1.0 + 1e-10), "{r:?}");
            if let (Some(k), Some(m)) = (r.kbold, r.max_sq_norm) {
                assert!(m <= k * (1.0 + 1e-10), "{m} > {k}");
                assert!(m > 0.5 * k, "clamp never reached: {m} vs {k}");
            }
        }
    }

    #[test]
    fn g_is_lipschitz_in_h_for_fixed_increment() {
        let g = g1(12);
        let psi = Field::zeros(g);
        let spec = NoiseSpec::multi_mode(1.0, 5);
        let op = NoiseOperator::new(spec, g).unwrap();
        let inc = sample_increment(&spec, 0.5, StreamKey::new(3, 0, 0)).unwrap();
        let bound_factor: f64 = op
            .weighted_basis
            .iter()
            .zip(&inc.betas)
            .map(|(b, db)| b.iter().fold(0.0f64, |m, v| m.max(v.abs())) * db.abs())
            .sum();
        let u = Field::from_fn(g, |x| (3.0 * x[0]).sin());
        let v = Field::from_fn(g, |x| x[0] - 0.4);
        let du = op.apply(&u, &psi, &inc).unwrap().sub(&op.apply(&v, &psi, &inc).unwrap()).unwrap();
        assert!(du.norm_h() <= spec.c * bound_factor * u.sub(&v).unwrap().norm_h() * (1.0 + 1e-12));
    }
}
