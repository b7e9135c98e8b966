//! Penalization schemes for stochastic obstacle problems driven by a
//! T-monotone p-Laplacian and multiplicative noise vanishing on the obstacle,
//! together with the Monte Carlo experiments that probe their long-time
//! behaviour.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ergodic;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod noise;
pub mod operators;
pub mod presets;
pub mod problem;
pub mod report;
pub mod stepper;

pub use error::{Error, Result};
pub use grid::{Field, Grid};
pub use noise::{NoiseIncrement, NoiseKind, NoiseOperator, NoiseSpec, StreamKey};
pub use operators::{CompatibilityData, OperatorSpec};
pub use presets::{preset, FieldProfile, Scenario};
pub use problem::ProblemSpec;
pub use report::{csv_string, write_csv, Table};
pub use stepper::{Member, Scheme, StepConfig, StepResult, Stepper, Trajectory, ViSolver};
