//! Which long-time statements the hypotheses of a problem certify.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

pub const DEFAULT_DELTA: f64 = 0.25;
pub const K_GRID_POINTS: usize = 81;
pub const K_GRID_RANGE: (f64, f64) = (1e-2, 1e4);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PCase {
    #[serde(rename = "pGT2")]
    PGt2,
    #[serde(rename = "pEQ2")]
    PEq2,
    #[serde(rename = "pLT2")]
    PLt2,
}

impl PCase {
    pub fn of(p: f64) -> Self {
        if p > 2.0 {
            PCase::PGt2
        } else if p == 2.0 {
            PCase::PEq2
        } else {
            PCase::PLt2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Existence {
    ErgodicInvariant,
    Invariant,
    NoneCertified,
}

/// Slacks of the `K`-dependent conditions at one grid point; positive
/// means satisfied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSlack {
    pub k: f64,
    /// `(1-δ)α - C_D [λ + L_G(1+K²)/(2K²)]⁺`.
    pub cond_invariant: f64,
    /// `γ - L_G(1+K²)/(2K²) - λ`.
    pub gamma_condition: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub p_case: PCase,
    pub existence: Existence,
    pub uniqueness: bool,
    pub delta: f64,
    pub c_d: f64,
    pub alpha: f64,
    /// Coercivity shift used in the conditions.
    pub lambda: f64,
    /// T-monotonicity constant after absorbing the zero-order terms.
    pub lambda_t: f64,
    pub l_g: f64,
    /// Coefficient of the linear perturbation `F(u) = γu`; for `p < 2`
    /// the zero-order term `κu` of the operator is moved here.
    pub gamma: f64,
    /// Best slack over the `K` grid.
    pub cond_invariant_slack: f64,
    /// `λ ≤ 0` and `‖G(σ)‖² ≤ 𝐊` for a finite `𝐊`.
    pub bounded_noise: bool,
    pub kbold: Option<f64>,
    pub gamma_condition_slack: f64,
    /// `L_G/2 + λ_T`; negative means contraction.
    pub uniqueness_margin: f64,
    pub k_opt: f64,
    /// Slack of the closed-form condition quoted for the model example:
    /// `κ - c²/2` for `p > 2`, `κ - 2c²` otherwise, with `c² = L_G`.
    pub example_condition_slack: f64,
    pub per_k: Vec<KSlack>,
}

pub fn k_grid() -> Vec<f64> {
    let (lo, hi) = (K_GRID_RANGE.0.log10(), K_GRID_RANGE.1.log10());
    (0..K_GRID_POINTS)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (K_GRID_POINTS - 1) as f64))
        .collect()
}

pub fn classify_regime(problem: &ProblemSpec, delta: f64) -> Result<RegimeReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} must lie in (0, 1)")));
    }
    problem.operator.validate()?;
    problem.noise.validate()?;
    let ops = &problem.operator;
    let p_case = PCase::of(ops.p);
    let c_d = problem.grid.poincare_embedding_constant();
    let alpha = ops.alpha();
    let l_g = problem.noise.l_g();
    let kbold = problem.noise.kbold();
    let zero_order = ops.kappa + ops.gamma;
    let (lambda, gamma) = match p_case {
        PCase::PLt2 => (0.0, zero_order),
        _ => ((-zero_order).max(0.0), 0.0),
    };
    let lambda_t = -zero_order;

    let per_k: Vec<KSlack> = k_grid()
        .into_iter()
        .map(|k| {
            let noise_term = l_g * (1.0 + k * k) / (2.0 * k * k);
            KSlack {
                k,
                cond_invariant: (1.0 - delta) * alpha - c_d * (lambda + noise_term).max(0.0),
                gamma_condition: gamma - noise_term - lambda,
            }
        })
        .collect();
    let best = |f: fn(&KSlack) -> f64| {
        per_k.iter().fold((f64::NEG_INFINITY, per_k[0].k), |acc, s| if f(s) > acc.0 { (f(s), s.k) } else { acc })
    };
    let (cond_invariant_slack, k_cond) = best(|s| s.cond_invariant);
    let (gamma_condition_slack, k_gamma) = best(|s| s.gamma_condition);
    let bounded_noise = lambda <= 0.0 && kbold.is_some();

    let mut existence = match p_case {
        PCase::PGt2 => Existence::ErgodicInvariant,
        PCase::PEq2 if cond_invariant_slack > 0.0 || bounded_noise => Existence::ErgodicInvariant,
        PCase::PLt2 if gamma_condition_slack > 0.0 || bounded_noise => Existence::Invariant,
        _ => Existence::NoneCertified,
    };
    let uniqueness_margin = l_g / 2.0 + lambda_t;
    let uniqueness = uniqueness_margin < 0.0 && existence != Existence::NoneCertified;
    if uniqueness {
        existence = Existence::ErgodicInvariant;
    }
    let example_condition_slack = match p_case {
        PCase::PGt2 => zero_order - l_g / 2.0,
        _ => zero_order - 2.0 * l_g,
    };
    Ok(RegimeReport {
        p_case,
        existence,
        uniqueness,
        delta,
        c_d,
        alpha,
        lambda,
        lambda_t,
        l_g,
        gamma,
        cond_invariant_slack,
        bounded_noise,
        kbold,
        gamma_condition_slack,
        uniqueness_margin,
        k_opt: if p_case == PCase::PLt2 { k_gamma } else { k_cond },
        example_condition_slack,
        per_k,
    })
}
