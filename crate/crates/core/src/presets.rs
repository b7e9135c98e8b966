//! Named scenarios built on the model problem
//!
//! ```text
//! du - div(|∇u|^{p-2}∇u) dt + κu dt + k dt = f dt + c u dβ,   u ≥ ψ
//! ```
//!
//! with `f(x) = sin(x)` sampled on the grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::noise::NoiseSpec;
use crate::operators::{apply_a, OperatorSpec};
use crate::problem::ProblemSpec;
use crate::stepper::StepConfig;

pub const PRESET_NAMES: [&str; 7] = [
    "stationary",
    "example-p3",
    "example-p3-unique",
    "example-p2-unique",
    "example-p15-unique",
    "ls-regular",
    "ls-regular-p15",
];

/// Interior nodes per axis used when a scenario does not fix `n`.
pub fn default_resolution(dim: usize) -> usize {
    if dim == 2 {
        32
    } else {
        64
    }
}

pub const DEFAULT_DT: f64 = 0.01;

/// A nodal field described by formula.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldProfile {
    Zero,
    Constant { value: f64 },
    /// `amplitude · Π_k sin(π x_k)`.
    Sine { amplitude: f64 },
    /// `sin(x₁)`.
    SinX,
    /// `ψ + offset`; only meaningful for the initial datum.
    ObstacleShift { offset: f64 },
    /// `A(ψ) + γψ`, so the compatibility datum vanishes; only meaningful for `f`.
    Balance,
}

impl FieldProfile {
    pub fn resolve(&self, grid: Grid, ops: &OperatorSpec, psi: Option<&Field>) -> Result<Field> {
        let need_psi = || {
            psi.ok_or_else(|| Error::InvalidParameter(format!("profile {self:?} needs the obstacle")))
        };
        Ok(match *self {
            FieldProfile::Zero => Field::zeros(grid),
            FieldProfile::Constant { value } => Field::constant(grid, value),
            FieldProfile::Sine { amplitude } => {
                let dim = grid.dim();
                Field::from_fn(grid, |x| {
                    amplitude * x[..dim].iter().map(|&c| (PI * c).sin()).product::<f64>()
                })
            }
            FieldProfile::SinX => Field::from_fn(grid, |x| x[0].sin()),
            FieldProfile::ObstacleShift { offset } => need_psi()?.map(|v| v + offset),
            FieldProfile::Balance => {
                let psi = need_psi()?;
                apply_a(ops, psi)?.add(&psi.scale(ops.gamma))?
            }
        })
    }
}

/// Everything needed to build a [`ProblemSpec`] and its [`StepConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dim: usize,
    pub n: usize,
    pub operator: OperatorSpec,
    pub noise: NoiseSpec,
    pub psi: FieldProfile,
    pub f: FieldProfile,
    pub u0: FieldProfile,
    pub dt: f64,
    pub epsilon: f64,
}

impl Scenario {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.n)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let grid = self.grid()?;
        let ops = self.operator;
        ops.validate()?;
        let psi = self.psi.resolve(grid, &ops, None)?;
        let f = self.f.resolve(grid, &ops, Some(&psi))?;
        let u0 = self.u0.resolve(grid, &ops, Some(&psi))?;
        let problem = ProblemSpec { grid, operator: ops, noise: self.noise, psi, f, u0 };
        problem.validate()?;
        Ok(problem)
    }

    pub fn step_config(&self) -> Result<StepConfig> {
        let cfg = StepConfig::new(&self.operator, self.dt, self.epsilon);
        cfg.validate(&self.operator)?;
        Ok(cfg)
    }

    pub fn build(&self) -> Result<(ProblemSpec, StepConfig)> {
        Ok((self.problem()?, self.step_config()?))
    }
}

fn example(p: f64, kappa: f64) -> Scenario {
    Scenario {
        dim: 1,
        n: default_resolution(1),
        operator: OperatorSpec::new(p, kappa),
        noise: NoiseSpec::scalar(1.0),
        psi: FieldProfile::Zero,
        f: FieldProfile::SinX,
        u0: FieldProfile::Sine { amplitude: 1.0 },
        dt: DEFAULT_DT,
        epsilon: 1e-4,
    }
}

fn ls_regular(p: f64) -> Scenario {
    Scenario {
        psi: FieldProfile::Zero,
        f: FieldProfile::Constant { value: -1.0 },
        u0: FieldProfile::Sine { amplitude: 0.5 },
        epsilon: 1e-5,
        ..example(p, 0.0)
    }
}

/// The scenario registered under `name`.
pub fn preset(name: &str) -> Result<Scenario> {
    Ok(match name {
        "stationary" => Scenario {
            psi: FieldProfile::Sine { amplitude: 0.5 },
            f: FieldProfile::Balance,
            u0: FieldProfile::ObstacleShift { offset: 0.0 },
            ..example(2.0, 1.0)
        },
        "example-p3" => example(3.0, 0.0),
        "example-p3-unique" => example(3.0, 1.0),
        "example-p2-unique" => example(2.0, 2.0),
        "example-p15-unique" => example(1.5, 3.0),
        "ls-regular" => ls_regular(2.0),
        "ls-regular-p15" => ls_regular(1.5),
        other => return Err(Error::UnknownPreset(other.to_string())),
    })
}
