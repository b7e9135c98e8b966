use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::noise::NoiseSpec;
use crate::operators::{compute_compatibility, CompatibilityData, OperatorSpec};

/// The data `(A, G, ψ, f, u₀)` of a stochastic obstacle problem on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub grid: Grid,
    pub operator: OperatorSpec,
    pub noise: NoiseSpec,
    pub psi: Field,
    pub f: Field,
    pub u0: Field,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        self.operator.validate()?;
        self.noise.validate()?;
        for field in [&self.psi, &self.f, &self.u0] {
            if *field.grid() != self.grid {
                return Err(Error::GridMismatch);
            }
            field.check_finite()?;
        }
        check_above_obstacle(&self.u0, &self.psi)?;
        self.compatibility()?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn compatibility(&self) -> Result<CompatibilityData> {
        compute_compatibility(&self.operator, &self.psi, &self.f)
    }

    pub fn with_u0(&self, u0: Field) -> Self {
        Self { u0, ..self.clone() }
    }
}

pub(crate) fn check_above_obstacle(u: &Field, psi: &Field) -> Result<()> {
    u.same_grid(psi)?;
    for (index, (&value, &obstacle)) in u.values().iter().zip(psi.values()).enumerate() {
        if value < obstacle {
            return Err(Error::ConstraintViolated { index, value, obstacle });
        }
    }
    Ok(())
}
