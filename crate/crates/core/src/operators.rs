//! The operator `A(u) = -div(|∇u|^{p-2}∇u) + κu`, assembled as the exact
//! gradient of the discrete energy
//!
//! ```text
//! E(u) = h^dim [ (1/p) Σ_e |D^e u|_reg^p + (κ/2) Σ_i u_i² ],   |g|_reg = sqrt(g² + δ²)
//! ```
//!
//! with respect to the `H` inner product, so that `⟨A u, v⟩_H = ∇E(u)·v`.
//! Because every edge flux is a monotone function of its own difference the
//! discrete operator is T-monotone with `λ_T = -κ` and coercive with `α = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Edge, Field, Grid};
use crate::linalg::BandedSym;

/// Default gradient regulariser for the singular range `p < 2`.
pub const DEFAULT_DELTA_REG: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    /// Growth exponent, `p > 1`.
    pub p: f64,
    /// Zero-order coefficient inside `A`.
    #[serde(default)]
    pub kappa: f64,
    /// Coefficient of the Lipschitz perturbation `F(u) = γu`.
    #[serde(default)]
    pub gamma: f64,
    /// Gradient regulariser; must be positive when `p < 2`.
    #[serde(default)]
    pub delta_reg: f64,
}

impl OperatorSpec {
    /// Pure p-Laplacian plus `κu`, with the default regulariser when `p < 2`.
    pub fn new(p: f64, kappa: f64) -> Self {
        let delta_reg = if p < 2.0 { DEFAULT_DELTA_REG } else { 0.0 };
        Self { p, kappa, gamma: 0.0, delta_reg }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::InvalidExponent(self.p));
        }
        if !self.kappa.is_finite() || !self.gamma.is_finite() {
            return Err(Error::InvalidOperator("kappa and gamma must be finite".into()));
        }
        if !(self.delta_reg >= 0.0) || !self.delta_reg.is_finite() {
            return Err(Error::InvalidOperator(format!(
                "delta_reg = {} must be finite and nonnegative",
                self.delta_reg
            )));
        }
        if self.p < 2.0 && self.delta_reg == 0.0 {
            return Err(Error::InvalidOperator(format!(
                "p = {} < 2 requires delta_reg > 0",
                self.p
            )));
        }
        Ok(())
    }

    /// Penalty exponent `q̃ = min(p, 2)`.
    pub fn q_tilde(&self) -> f64 {
        self.p.min(2.0)
    }

    /// Coercivity constant; exact for the edge-flux assembly.
    pub fn alpha(&self) -> f64 {
        1.0
    }

    /// Coercivity shift λ.
    pub fn lambda(&self) -> f64 {
        (-self.kappa).max(0.0)
    }

    pub fn lambda_t(&self) -> f64 {
        -self.kappa
    }

    pub fn l1(&self) -> f64 {
        0.0
    }

    /// Lipschitz constant of `F(u) = γu`.
    pub fn l_f(&self) -> f64 {
        self.gamma.abs()
    }

    /// `|F(0)|`, zero for the linear perturbation.
    pub fn f0(&self) -> f64 {
        0.0
    }

    fn singular(&self) -> bool {
        self.p < 2.0 && self.delta_reg == 0.0
    }

    /// Edge flux `|g|_reg^{p-2} g`.
    #[inline]
    pub fn flux(&self, g: f64) -> f64 {
        if self.p == 2.0 {
            g
        } else if self.delta_reg == 0.0 {
            g.abs().powf(self.p - 2.0) * g
        } else {
            (g * g + self.delta_reg * self.delta_reg).powf(0.5 * (self.p - 2.0)) * g
        }
    }

    /// Derivative of the edge flux with respect to `g`.
    #[inline]
    pub fn flux_derivative(&self, g: f64) -> f64 {
        if self.p == 2.0 {
            1.0
        } else if self.delta_reg == 0.0 {
            (self.p - 1.0) * g.abs().powf(self.p - 2.0)
        } else {
            let d2 = self.delta_reg * self.delta_reg;
            let s = g * g + d2;
            s.powf(0.5 * (self.p - 4.0)) * ((self.p - 1.0) * g * g + d2)
        }
    }

    /// Edge energy density `(1/p) |g|_reg^p`.
    #[inline]
    fn edge_energy(&self, g: f64) -> f64 {
        if self.delta_reg == 0.0 {
            g.abs().powf(self.p) / self.p
        } else {
            (g * g + self.delta_reg * self.delta_reg).powf(0.5 * self.p) / self.p
        }
    }
}

/// `A(u)` as a nodal field.
pub fn apply_a(spec: &OperatorSpec, u: &Field) -> Result<Field> {
    let grid = *u.grid();
    let inv_h = 1.0 / grid.h();
    let mut out = u.scale(spec.kappa);
    let vals = out.values_mut();
    for (e, g) in grid.edges().zip(u.edge_differences()) {
        if spec.singular() && g == 0.0 {
            return Err(Error::SingularGradient { p: spec.p });
        }
        let q = spec.flux(g) * inv_h;
        if let Some(i) = e.head {
            vals[i] += q;
        }
        if let Some(i) = e.tail {
            vals[i] -= q;
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// Discrete energy whose `H`-gradient is `apply_a`.
pub fn energy(spec: &OperatorSpec, u: &Field) -> f64 {
    let grid = u.grid();
    let edges: f64 = u.edge_differences().map(|g| spec.edge_energy(g)).sum();
    let mass: f64 = u.values().iter().map(|v| v * v).sum();
    grid.cell_volume() * (edges + 0.5 * spec.kappa * mass)
}

/// Adds `scale · ∂A/∂u` (the nodal Jacobian of `apply_a`) to `jac`.
pub(crate) fn add_jacobian(spec: &OperatorSpec, u: &Field, scale: f64, jac: &mut BandedSym) {
    add_edge_matrix(spec, u, scale, jac, |g| spec.flux_derivative(g));
}

/// Like [`add_jacobian`] with the secant weight `|g|_reg^{p-2}` in place of
/// the flux derivative. For `p < 2` the resulting quadratic majorizes the
/// edge energy.
pub(crate) fn add_secant_matrix(spec: &OperatorSpec, u: &Field, scale: f64, jac: &mut BandedSym) {
    add_edge_matrix(spec, u, scale, jac, |g| {
        if spec.p == 2.0 {
            1.0
        } else {
            (g * g + spec.delta_reg * spec.delta_reg).powf(0.5 * (spec.p - 2.0))
        }
    });
}

fn add_edge_matrix(
    spec: &OperatorSpec,
    u: &Field,
    scale: f64,
    jac: &mut BandedSym,
    weight: impl Fn(f64) -> f64,
) {
    let grid = *u.grid();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    for (e, g) in grid.edges().zip(u.edge_differences()) {
        let w = scale * weight(g) * inv_h2;
        if let Some(i) = e.head {
            jac.add(i, i, w);
        }
        if let Some(j) = e.tail {
            jac.add(j, j, w);
        }
        if let (Some(i), Some(j)) = (e.head, e.tail) {
            jac.add(i, j, -w);
        }
    }
    jac.add_diagonal(scale * spec.kappa);
}

/// Maximum deviation between `apply_a` and a fourth-order central difference
/// of the discrete energy, taken node by node.
///
/// Only the energy terms that depend on node `i` enter the quotient for that
/// node; the remaining terms cancel identically.
pub fn energy_gradient_deviation(spec: &OperatorSpec, u: &Field, step: f64) -> Result<f64> {
    if spec.singular() {
        return Err(Error::InvalidOperator("gradient check needs p >= 2 or delta_reg > 0".into()));
    }
    let grid = *u.grid();
    let analytic = apply_a(spec, u)?;
    let edges: Vec<Edge> = grid.edges().collect();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); grid.dof()];
    for (k, e) in edges.iter().enumerate() {
        for i in [e.tail, e.head].into_iter().flatten() {
            incident[i].push(k);
        }
    }
    let inv_h = 1.0 / grid.h();
    let mut work = u.clone();
    let mut worst = 0.0f64;
    for i in 0..grid.dof() {
        let base = u.values()[i];
        let local = |w: &Field| -> f64 {
            let e: f64 = incident[i]
                .iter()
                .map(|&k| {
                    let g = (w.at(edges[k].head) - w.at(edges[k].tail)) * inv_h;
                    spec.edge_energy(g)
                })
                .sum();
            let ui = w.values()[i];
            e + 0.5 * spec.kappa * ui * ui
        };
        let mut eval = |offset: f64| {
            work.values_mut()[i] = base + offset;
            local(&work)
        };
        let (e2p, e1p, e1m, e2m) = (eval(2.0 * step), eval(step), eval(-step), eval(-2.0 * step));
        work.values_mut()[i] = base;
        // energy carries h^dim; the local sum omitted it, so this is ∂E/∂u_i / h^dim
        let fd = (-e2p + 8.0 * e1p - 8.0 * e1m + e2m) / (12.0 * step);
        worst = worst.max((fd - analytic.values()[i]).abs());
    }
    Ok(worst)
}

/// Nodal penalty force `-(1/ε) max(0, ψ - u)^{q̃-1}`.
pub fn penalty_force(u: &Field, psi: &Field, epsilon: f64, q_tilde: f64) -> Result<Field> {
    check_penalty_params(epsilon, q_tilde)?;
    u.zip_map(psi, |ui, pi| penalty_value(pi - ui, epsilon, q_tilde))
}

pub(crate) fn check_penalty_params(epsilon: f64, q_tilde: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    if !(q_tilde > 1.0 && q_tilde <= 2.0) {
        return Err(Error::InvalidPenaltyExponent(q_tilde));
    }
    Ok(())
}

/// Penalty at a node with obstacle gap `ψ - u`.
#[inline]
pub(crate) fn penalty_value(gap: f64, epsilon: f64, q_tilde: f64) -> f64 {
    if gap <= 0.0 {
        0.0
    } else if q_tilde == 2.0 {
        -gap / epsilon
    } else {
        -gap.powf(q_tilde - 1.0) / epsilon
    }
}

/// The datum `h = f - A(ψ) - γψ` and its nodal positive and negative parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityData {
    pub h_field: Field,
    pub h_minus: Field,
    pub h_plus: Field,
}

pub fn compute_compatibility(
    spec: &OperatorSpec,
    psi: &Field,
    f: &Field,
) -> Result<CompatibilityData> {
    psi.same_grid(f)?;
    let a_psi = apply_a(spec, psi)?;
    let mut h_field = f.sub(&a_psi)?;
    for (h, p) in h_field.values_mut().iter_mut().zip(psi.values()) {
        *h -= spec.gamma * p;
    }
    let h_minus = h_field.negative_part();
    let h_plus = h_field.positive_part();
    Ok(CompatibilityData { h_field, h_minus, h_plus })
}

/// `λ_T (w, w⁺)_H + ⟨A(v₁) - A(v₂), w⁺⟩` with `w = v₁ - v₂`, together with
/// the magnitude of its terms (for scale-aware comparisons).
pub fn t_monotone_pairing(spec: &OperatorSpec, v1: &Field, v2: &Field) -> Result<(f64, f64)> {
    let w = v1.sub(v2)?;
    let wp = w.positive_part();
    let da = apply_a(spec, v1)?.sub(&apply_a(spec, v2)?)?;
    let shift = spec.lambda_t() * w.inner_h(&wp)?;
    let pairing = da.inner_h(&wp)?;
    let scale = shift.abs()
        + v1.grid().cell_volume()
            * da.values().iter().zip(wp.values()).map(|(a, b)| (a * b).abs()).sum::<f64>();
    Ok((shift + pairing, scale))
}

/// Result of the randomized T-monotonicity certification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TMonotoneCheck {
    pub trials: usize,
    /// Smallest raw left-hand side observed.
    pub min_value: f64,
    /// Smallest value relative to `max(1, scale)` of its terms.
    pub min_slack: f64,
}

fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> Field {
    let values = (0..grid.dof()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Field::from_values(grid, values).expect("finite draws")
}

pub fn check_t_monotone(
    spec: &OperatorSpec,
    grid: Grid,
    trials: usize,
    seed: u64,
) -> Result<TMonotoneCheck> {
    spec.validate()?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_value = f64::INFINITY;
    let mut min_slack = f64::INFINITY;
    for _ in 0..trials {
        let v1 = random_field(grid, &mut rng);
        let v2 = random_field(grid, &mut rng);
        let (value, scale) = t_monotone_pairing(spec, &v1, &v2)?;
        min_value = min_value.min(value);
        min_slack = min_slack.min(value / scale.max(1.0));
    }
    Ok(TMonotoneCheck { trials, min_value, min_slack })
}

/// Result of the randomized coercivity certification with `α = 1`,
/// `λ = max(0, -κ)`, `l₁ = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoercivityCheck {
    pub trials: usize,
    pub alpha: f64,
    /// Smallest observed `(⟨A v, v⟩ + λ‖v‖²_H + l₁) / ‖v‖_V^p`.
    pub empirical_alpha: f64,
    /// `empirical_alpha - alpha`; nonnegative when the bound holds.
    pub min_slack: f64,
}

pub fn coercivity_ratio(spec: &OperatorSpec, v: &Field) -> Result<Option<f64>> {
    let vp = v.norm_vp_pow(spec.p)?;
    if vp == 0.0 {
        return Ok(None);
    }
    let av = apply_a(spec, v)?.inner_h(v)?;
    Ok(Some((av + spec.lambda() * v.norm_h().powi(2) + spec.l1()) / vp))
}

pub fn check_coercivity(
    spec: &OperatorSpec,
    grid: Grid,
    trials: usize,
    seed: u64,
) -> Result<CoercivityCheck> {
    spec.validate()?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let v = random_field(grid, &mut rng);
        if let Some(r) = coercivity_ratio(spec, &v)? {
            worst = worst.min(r);
        }
    }
    Ok(CoercivityCheck {
        trials,
        alpha: spec.alpha(),
        empirical_alpha: worst,
        min_slack: worst - spec.alpha(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn g1(n: usize) -> Grid {
        Grid::new(1, n).unwrap()
    }

    /// Random combination of the lowest sine modes with unit-size coefficients.
    fn smooth_random_field(grid: Grid, rng: &mut ChaCha8Rng) -> Field {
        let coef: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        Field::from_fn(grid, |[x, y]| {
            let pi = std::f64::consts::PI;
            let mut s = 0.0;
            for a in 0..5 {
                let sx = ((a + 1) as f64 * pi * x).sin();
                if grid.dim() == 1 {
                    s += coef[a] * sx;
                } else {
                    for b in 0..5 {
                        s += coef[5 * a + b] * sx * ((b + 1) as f64 * pi * y).sin();
                    }
                }
            }
            s
        })
    }

    #[test]
    fn a_of_zero_is_zero() {
        for p in [1.5, 2.0, 3.0] {
            for kappa in [-1.0, 0.0, 2.0] {
                let spec = OperatorSpec::new(p, kappa);
                let z = Field::zeros(g1(5));
                let a = apply_a(&spec, &z).unwrap();
                assert!(a.sup_norm() == 0.0);
            }
        }
    }

    #[test]
    fn one_dof_examples() {
        // hand-assembled: slopes ±2 on h = 1/2
        let u = Field::constant(g1(1), 1.0);
        let a2 = apply_a(&OperatorSpec::new(2.0, 0.0), &u).unwrap();
        assert!((a2.values()[0] - 8.0).abs() < 1e-14);
        let a3 = apply_a(&OperatorSpec::new(3.0, 0.0), &u).unwrap();
        assert!((a3.values()[0] - 16.0).abs() < 1e-13);
        // brute-force derivative of (h/p)Σ|Du|^p for the single node
        let e = |x: f64| 0.5 / 3.0 * 2.0 * (2.0 * x).abs().powi(3);
        let s = 1e-5;
        let fd = (e(1.0 + s) - e(1.0 - s)) / (2.0 * s) / 0.5;
        assert!((fd - 16.0).abs() < 1e-6);
    }

    #[test]
    fn p2_is_standard_laplacian_plus_kappa() {
        let g = g1(4);
        let h2 = g.h() * g.h();
        let u = Field::from_values(g, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let a = apply_a(&OperatorSpec::new(2.0, 1.5), &u).unwrap();
        let v = u.values();
        for i in 0..4 {
            let left = if i > 0 { v[i - 1] } else { 0.0 };
            let right = if i < 3 { v[i + 1] } else { 0.0 };
            let expected = (2.0 * v[i] - left - right) / h2 + 1.5 * v[i];
            assert!((a.values()[i] - expected).abs() < 1e-11);
        }
        // 2D five-point
        let g = Grid::new(2, 3).unwrap();
        let u = Field::from_fn(g, |x| x[0] * (1.0 - x[0]) + 2.0 * x[1]);
        let a = apply_a(&OperatorSpec::new(2.0, 0.0), &u).unwrap();
        let h2 = g.h() * g.h();
        let at = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= 3 || j >= 3 {
                0.0
            } else {
                u.values()[(i + 3 * j) as usize]
            }
        };
        for j in 0..3isize {
            for i in 0..3isize {
                let expected = (4.0 * at(i, j) - at(i - 1, j) - at(i + 1, j) - at(i, j - 1)
                    - at(i, j + 1))
                    / h2;
                assert!((a.values()[(i + 3 * j) as usize] - expected).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn singular_gradient_is_reported() {
        let spec = OperatorSpec { p: 1.5, kappa: 0.0, gamma: 0.0, delta_reg: 0.0 };
        assert!(spec.validate().is_err());
        let u = Field::constant(g1(3), 1.0); // interior edges have zero slope
        assert!(matches!(apply_a(&spec, &u), Err(Error::SingularGradient { .. })));
    }

    #[test]
    fn gradient_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (dim, n) in [(1, 64), (2, 12)] {
            let g = Grid::new(dim, n).unwrap();
            let u = smooth_random_field(g, &mut rng);
            for (p, tol) in [(2.0, 1e-6), (3.0, 1e-5), (1.5, 1e-5)] {
                for kappa in [-1.0, 0.0, 2.0] {
                    let spec = OperatorSpec::new(p, kappa);
                    let dev = energy_gradient_deviation(&spec, &u, 1e-5).unwrap();
                    assert!(dev <= tol, "dim {dim} p {p} kappa {kappa}: {dev}");
                }
            }
            let spec = OperatorSpec::new(3.0, 0.0);
            assert_eq!(energy_gradient_deviation(&spec, &Field::zeros(g), 1e-5).unwrap(), 0.0);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid::new(2, 4).unwrap();
        let u = random_field(g, &mut rng);
        for p in [1.5, 2.0, 3.0] {
            let spec = OperatorSpec::new(p, 0.7);
            let mut jac = BandedSym::zeros(g.dof(), g.bandwidth());
            add_jacobian(&spec, &u, 1.0, &mut jac);
            for j in 0..g.dof() {
                let s = 1e-6;
                let mut up = u.clone();
                up.values_mut()[j] += s;
                let mut dn = u.clone();
                dn.values_mut()[j] -= s;
                let col = apply_a(&spec, &up).unwrap().sub(&apply_a(&spec, &dn).unwrap()).unwrap();
                for i in 0..g.dof() {
                    let fd = col.values()[i] / (2.0 * s);
                    let an = jac.get(i, j);
                    assert!((fd - an).abs() < 1e-4 * an.abs().max(1.0), "p {p} ({i},{j}) {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn summation_by_parts_p2() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = OperatorSpec::new(2.0, 0.0);
        for (dim, n) in [(1, 20), (2, 7)] {
            let g = Grid::new(dim, n).unwrap();
            for _ in 0..50 {
                let u = random_field(g, &mut rng);
                let v = random_field(g, &mut rng);
                let auv = apply_a(&spec, &u).unwrap().inner_h(&v).unwrap();
                let avu = apply_a(&spec, &v).unwrap().inner_h(&u).unwrap();
                let edge: f64 = g.cell_volume()
                    * u.edge_differences().zip(v.edge_differences()).map(|(a, b)| a * b).sum::<f64>();
                assert!((auv - avu).abs() <= 1e-12 * auv.abs().max(1.0));
                assert!((auv - edge).abs() <= 1e-12 * edge.abs().max(1.0));
            }
        }
    }

    #[test]
    fn p_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = g1(16);
        for p in [2.0, 2.5, 3.0, 4.0] {
            let spec = OperatorSpec::new(p, 0.0);
            let u = random_field(g, &mut rng);
            let c = 1.7;
            let lhs = apply_a(&spec, &u.scale(c)).unwrap();
            let rhs = apply_a(&spec, &u).unwrap().scale(c.powf(p - 1.0));
            let err = lhs.sub(&rhs).unwrap().sup_norm();
            assert!(err <= 1e-12 * rhs.sup_norm(), "p {p}: {err}");
        }
    }

    #[test]
    fn penalty_examples() {
        let g = g1(3);
        let psi = Field::from_values(g, vec![1.0, 0.0, -1.0]).unwrap();
        let above = Field::constant(g, 1.0);
        assert!(penalty_force(&above, &psi, 0.1, 2.0).unwrap().sup_norm() == 0.0);
        let u = Field::zeros(g);
        let k = penalty_force(&u, &psi, 0.1, 2.0).unwrap();
        assert!((k.values()[0] + 10.0).abs() < 1e-14);
        assert_eq!(&k.values()[1..], &[0.0, 0.0]);
        let k = penalty_force(&u, &psi, 0.1, 1.5).unwrap();
        assert!((k.values()[0] + 10.0).abs() < 1e-14);
        assert!(matches!(penalty_force(&u, &psi, 0.0, 2.0), Err(Error::InvalidEpsilon(_))));
        assert!(matches!(penalty_force(&u, &psi, 1.0, 2.5), Err(Error::InvalidPenaltyExponent(_))));
    }

    #[test]
    fn compatibility_examples() {
        let g = g1(8);
        let spec = OperatorSpec::new(3.0, 0.5).with_gamma(0.25);
        let psi = Field::from_fn(g, |x| (std::f64::consts::PI * x[0]).sin() - 0.3);
        let mut f = apply_a(&spec, &psi).unwrap();
        for (fi, p) in f.values_mut().iter_mut().zip(psi.values()) {
            *fi += 0.25 * p;
        }
        let c = compute_compatibility(&spec, &psi, &f).unwrap();
        assert!(c.h_field.sup_norm() < 1e-12);
        assert!(c.h_minus.sup_norm() < 1e-12);

        let spec = OperatorSpec::new(2.0, 0.0);
        let zero = Field::zeros(g);
        let c = compute_compatibility(&spec, &zero, &Field::constant(g, -1.0)).unwrap();
        assert!(c.h_minus.values().iter().all(|&v| v == 1.0));

        let f = Field::from_fn(g, |x| (std::f64::consts::PI * x[0]).sin());
        let c = compute_compatibility(&spec, &zero, &f).unwrap();
        assert!(c.h_minus.sup_norm() == 0.0);
        let back = c.h_plus.sub(&c.h_minus).unwrap();
        assert_eq!(back, c.h_field);
    }

    #[test]
    fn t_monotone_identical_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_field(g1(10), &mut rng);
        let (v, _) = t_monotone_pairing(&OperatorSpec::new(3.0, 2.0), &u, &u).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn t_monotone_ordered_pair_p2_is_v_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = g1(12);
        let spec = OperatorSpec::new(2.0, 0.0);
        let v2 = random_field(g, &mut rng);
        let bump = random_field(g, &mut rng).map(f64::abs);
        let v1 = v2.add(&bump).unwrap();
        let (value, _) = t_monotone_pairing(&spec, &v1, &v2).unwrap();
        let vn = bump.norm_vp_pow(2.0).unwrap();
        assert!((value - vn).abs() < 1e-10 * vn);
    }

    #[test]
    fn t_monotone_fuzz() {
        for (p, kappa) in [(1.5, -1.0), (2.0, 0.0), (3.0, 2.0)] {
            let spec = OperatorSpec::new(p, kappa);
            let r = check_t_monotone(&spec, g1(16), 1000, 21).unwrap();
            assert!(r.min_slack >= -1e-9, "p {p}: {r:?}");
        }
    }

    #[test]
    fn coercivity_identities() {
        let spec = OperatorSpec::new(2.0, 0.0);
        let r = check_coercivity(&spec, g1(10), 200, 3).unwrap();
        assert!((r.empirical_alpha - 1.0).abs() < 1e-12);
        let spec = OperatorSpec::new(3.0, 1.0);
        let r = check_coercivity(&spec, g1(10), 200, 3).unwrap();
        assert!(r.empirical_alpha >= 1.0 - 1e-10);
        assert_eq!(coercivity_ratio(&spec, &Field::zeros(g1(4))).unwrap(), None);
    }

    proptest! {
        #[test]
        fn penalty_monotone_in_u(
            gap in -2.0f64..2.0,
            bump in 0.0f64..1.0,
            q in 1.01f64..=2.0,
            eps in 1e-6f64..1.0,
        ) {
            // raising u lowers the gap
            let lo = penalty_value(gap, eps, q);
            let hi = penalty_value(gap - bump, eps, q);
            prop_assert!(hi >= lo);
            prop_assert!(lo <= 0.0);
        }
    }
}
