//! Monte Carlo experiments on the long-time behaviour of the scheme.
//!
//! Every experiment fans paths out over the rayon pool, collects per-path
//! results in path order and reduces them sequentially, so reports are
//! bitwise reproducible for a given seed whatever the thread count.

mod averages;
mod coupling;
mod lewy;
mod rate;
pub mod regime;
pub mod stats;

pub use averages::{
    equilibrium_gap, kb_average, kb_average_from, tightness_scan, EquilibriumGap, ErgodicEstimate, GapStatus,
    InitialEstimate, TightnessScan,
};
pub use coupling::{coupling_decay, CouplingFit};
pub use lewy::{ls_check, LsReport};
pub use rate::{penalization_rate_study, RateStudy};
pub use regime::{classify_regime, Existence, PCase, RegimeReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::Field;
use crate::operators::OperatorSpec;
use crate::noise::NoiseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalKind {
    /// `min(‖u‖_H, B)`.
    ClippedHNorm,
    /// `h^dim Σ u_i`, clamped to `[-B, B]`.
    MeanValue,
    /// Share of nodes with `u - ψ < h`.
    ContactFraction,
}

/// A bounded Lipschitz test functional, multiplied by `scale` after clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Functional {
    pub kind: FunctionalKind,
    /// Clipping bound `B`; defaults to `10‖ψ‖_H + 10`.
    #[serde(default)]
    pub bound: Option<f64>,
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Functional {
    pub fn new(kind: FunctionalKind) -> Self {
        Self { kind, bound: None, scale: 1.0 }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn default_bound(psi: &Field) -> f64 {
        10.0 * psi.norm_h() + 10.0
    }

    /// Fixes the default bound for the given obstacle.
    pub fn resolved(&self, psi: &Field) -> Self {
        Self { bound: Some(self.bound.unwrap_or_else(|| Self::default_bound(psi))), ..*self }
    }

    pub fn evaluate(&self, u: &Field, psi: &Field) -> f64 {
        let b = self.bound.unwrap_or_else(|| Self::default_bound(psi));
        let grid = u.grid();
        let raw = match self.kind {
            FunctionalKind::ClippedHNorm => u.norm_h().min(b),
            FunctionalKind::MeanValue => (grid.cell_volume() * u.values().iter().sum::<f64>()).clamp(-b, b),
            FunctionalKind::ContactFraction => {
                let h = grid.h();
                let hits = u.values().iter().zip(psi.values()).filter(|(a, p)| *a - *p < h).count();
                hits as f64 / grid.dof() as f64
            }
        };
        raw * self.scale
    }
}

/// `L_G + 2λ_T`, with every zero-order term folded into `λ_T`.
pub fn feller_exponent(ops: &OperatorSpec, noise: &NoiseSpec) -> f64 {
    noise.l_g() - 2.0 * (ops.kappa + ops.gamma)
}

/// Runs `f` for every path index and returns the results in index order.
pub(crate) fn per_path<T: Send>(n_paths: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n_paths).into_par_iter().map(f).collect()
}

pub(crate) fn check_paths(n_paths: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(crate::error::Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    Ok(())
}
