//! TOML experiment configuration.
//!
//! ```toml
//! master_seed = 7
//! output_dir = "runs"
//! scenario = "example-p2-unique"
//!
//! [coupling]
//! horizon = 2.0
//! n_paths = 64
//! ```
//!
//! `scenario` is either a preset name or an inline table with every field
//! of [`Scenario`]. Command blocks are optional; missing ones take their
//! defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use obstacle_core::ergodic::regime::DEFAULT_DELTA;
use obstacle_core::ergodic::{Existence, Functional, FunctionalKind};
use obstacle_core::stepper::steps_for;
use obstacle_core::{preset, FieldProfile, ProblemSpec, Scenario, StepConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Preset(String),
    Inline(Box<Scenario>),
}

impl ScenarioRef {
    pub fn resolve(&self) -> Result<Scenario> {
        match self {
            ScenarioRef::Preset(name) => Ok(preset(name)?),
            ScenarioRef::Inline(s) => Ok((**s).clone()),
        }
    }
}

/// Overrides applied on top of the scenario's step settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOverrides {
    pub dt: Option<f64>,
    pub epsilon: Option<f64>,
    pub newton_tol: Option<f64>,
    pub newton_max_iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub trajectory_id: u64,
    pub thinning: usize,
    /// Also write every state in long form to `simulate_<timestamp>_states.csv`.
    pub write_states: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { horizon: 1.0, trajectory_id: 0, thinning: 1, write_states: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub x: FieldProfile,
    pub y: FieldProfile,
    pub horizon: f64,
    pub n_paths: usize,
    /// Allowed excess of the fitted exponent over `L_G + 2λ_T`.
    pub exponent_slack: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            x: FieldProfile::ObstacleShift { offset: 1.0 },
            y: FieldProfile::ObstacleShift { offset: 0.0 },
            horizon: 2.0,
            n_paths: 64,
            exponent_slack: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicConfig {
    pub functional: Functional,
    pub initial: Vec<FieldProfile>,
    pub horizon: f64,
    pub burn_in: f64,
    pub n_paths: usize,
    /// Agreement is required within this many joint standard errors...
    pub max_stderr: f64,
    /// ...and within this relative difference.
    pub max_relative: f64,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        Self {
            functional: Functional::new(FunctionalKind::ClippedHNorm),
            initial: vec![FieldProfile::ObstacleShift { offset: 0.0 }, FieldProfile::ObstacleShift { offset: 1.0 }],
            horizon: 50.0,
            burn_in: 10.0,
            n_paths: 16,
            max_stderr: 3.0,
            max_relative: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub functional: Functional,
    pub x: FieldProfile,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub exponent_slack: f64,
    /// With no signal above noise, the gap must stay within noise from here on.
    pub noise_after: f64,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self {
            functional: Functional::new(FunctionalKind::ClippedHNorm),
            x: FieldProfile::ObstacleShift { offset: 1.0 },
            times: vec![0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            n_paths: 64,
            exponent_slack: 0.3,
            noise_after: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TightnessConfig {
    pub horizons: Vec<f64>,
    pub burn_in: f64,
    pub n_paths: usize,
    pub max_spread: f64,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self { horizons: vec![10.0, 20.0, 40.0], burn_in: 5.0, n_paths: 16, max_spread: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsCheckConfig {
    pub horizon: f64,
    pub n_paths: usize,
    /// Tolerance as a fraction of `‖h⁻‖_∞`.
    pub tol_fraction: f64,
    /// Absolute tolerance; takes precedence over `tol_fraction`.
    pub tol: Option<f64>,
}

impl Default for LsCheckConfig {
    fn default() -> Self {
        Self { horizon: 2.0, n_paths: 8, tol_fraction: 0.05, tol: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateStudyConfig {
    pub epsilons: Vec<f64>,
    pub horizon: f64,
    pub n_paths: usize,
    pub min_slope: f64,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        Self { epsilons: vec![1e-2, 1e-3, 1e-4, 1e-5], horizon: 1.0, n_paths: 32, min_slope: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub delta: f64,
    pub expect_existence: Option<Existence>,
    pub expect_uniqueness: Option<bool>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { delta: DEFAULT_DELTA, expect_existence: None, expect_uniqueness: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpCheckConfig {
    pub exponents: Vec<f64>,
    pub kappas: Vec<f64>,
    pub trials: usize,
    /// Smooth test fields per `(p, κ)` for the gradient check.
    pub gradient_fields: usize,
    pub gradient_step: f64,
    pub slack_tol: f64,
    pub gradient_tol: f64,
}

impl Default for OpCheckConfig {
    fn default() -> Self {
        Self {
            exponents: vec![1.5, 2.0, 3.0],
            kappas: vec![-1.0, 0.0, 2.0],
            trials: 1000,
            gradient_fields: 10,
            gradient_step: 1e-5,
            slack_tol: 1e-9,
            gradient_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioRef,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub step: StepOverrides,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub ergodic: ErgodicConfig,
    #[serde(default)]
    pub equilibrium: EquilibriumConfig,
    #[serde(default)]
    pub tightness: TightnessConfig,
    #[serde(default)]
    pub ls_check: LsCheckConfig,
    #[serde(default)]
    pub rate_study: RateStudyConfig,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub op_check: OpCheckConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_preset(name: &str) -> Self {
        Self {
            scenario: ScenarioRef::Preset(name.to_string()),
            master_seed: 0,
            output_dir: default_output_dir(),
            step: StepOverrides::default(),
            simulate: SimulateConfig::default(),
            coupling: CouplingConfig::default(),
            ergodic: ErgodicConfig::default(),
            equilibrium: EquilibriumConfig::default(),
            tightness: TightnessConfig::default(),
            ls_check: LsCheckConfig::default(),
            rate_study: RateStudyConfig::default(),
            classify: ClassifyConfig::default(),
            op_check: OpCheckConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The scenario with step overrides applied.
    pub fn scenario(&self) -> Result<Scenario> {
        let mut s = self.scenario.resolve()?;
        if let Some(dt) = self.step.dt {
            s.dt = dt;
        }
        if let Some(eps) = self.step.epsilon {
            s.epsilon = eps;
        }
        Ok(s)
    }

    pub fn build(&self) -> Result<(ProblemSpec, StepConfig)> {
        let (problem, mut cfg) = self.scenario()?.build()?;
        if let Some(tol) = self.step.newton_tol {
            cfg.newton_tol = tol;
        }
        if let Some(iters) = self.step.newton_max_iters {
            cfg.newton_max_iters = iters;
        }
        cfg.validate(&problem.operator)?;
        Ok((problem, cfg))
    }

    /// Checks every numeric field before anything runs.
    pub fn validate(&self) -> Result<()> {
        let (problem, cfg) = self.build()?;
        let dt = cfg.dt;
        let horizon = |name: &str, t: f64| -> Result<()> {
            ensure!(t.is_finite() && t >= 0.0, "{name} = {t} must be finite and >= 0");
            steps_for(t, dt).with_context(|| format!("{name} = {t}"))?;
            Ok(())
        };
        let paths = |name: &str, n: usize| -> Result<()> {
            ensure!(n >= 1, "{name}.n_paths must be >= 1");
            Ok(())
        };
        let positive = |name: &str, x: f64| -> Result<()> {
            ensure!(x.is_finite() && x > 0.0, "{name} = {x} must be finite and > 0");
            Ok(())
        };
        let functional = |name: &str, f: &Functional| -> Result<()> {
            positive(&format!("{name}.functional.scale"), f.scale.abs())?;
            if let Some(b) = f.bound {
                positive(&format!("{name}.functional.bound"), b)?;
            }
            Ok(())
        };
        let profile = |name: &str, p: &FieldProfile| -> Result<()> {
            let field = p.resolve(problem.grid, &problem.operator, Some(&problem.psi))?;
            field.check_finite()?;
            if let Some(i) = field.values().iter().zip(problem.psi.values()).position(|(u, psi)| u < psi) {
                bail!("{name} lies below the obstacle at node {i}");
            }
            Ok(())
        };

        let s = &self.simulate;
        horizon("simulate.horizon", s.horizon)?;
        ensure!(s.thinning >= 1, "simulate.thinning must be >= 1");

        let c = &self.coupling;
        profile("coupling.x", &c.x)?;
        profile("coupling.y", &c.y)?;
        horizon("coupling.horizon", c.horizon)?;
        paths("coupling", c.n_paths)?;
        ensure!(c.exponent_slack.is_finite(), "coupling.exponent_slack must be finite");

        let e = &self.ergodic;
        functional("ergodic", &e.functional)?;
        ensure!(e.initial.len() >= 2, "ergodic.initial needs at least two initial conditions");
        for (i, p) in e.initial.iter().enumerate() {
            profile(&format!("ergodic.initial[{i}]"), p)?;
        }
        horizon("ergodic.horizon", e.horizon)?;
        horizon("ergodic.burn_in", e.burn_in)?;
        ensure!(e.burn_in < e.horizon, "ergodic.burn_in must be below ergodic.horizon");
        paths("ergodic", e.n_paths)?;
        positive("ergodic.max_stderr", e.max_stderr)?;
        positive("ergodic.max_relative", e.max_relative)?;

        let q = &self.equilibrium;
        functional("equilibrium", &q.functional)?;
        profile("equilibrium.x", &q.x)?;
        ensure!(!q.times.is_empty(), "equilibrium.times must not be empty");
        for t in &q.times {
            positive("equilibrium.times", *t)?;
            horizon("equilibrium.times", *t)?;
        }
        ensure!(q.times.windows(2).all(|w| w[0] < w[1]), "equilibrium.times must be increasing");
        paths("equilibrium", q.n_paths)?;
        ensure!(q.exponent_slack.is_finite() && q.noise_after.is_finite(), "equilibrium slack values must be finite");

        let t = &self.tightness;
        ensure!(!t.horizons.is_empty(), "tightness.horizons must not be empty");
        horizon("tightness.burn_in", t.burn_in)?;
        for h in &t.horizons {
            horizon("tightness.horizons", *h)?;
            ensure!(*h > t.burn_in, "tightness horizon {h} must exceed burn_in");
        }
        paths("tightness", t.n_paths)?;
        ensure!(t.max_spread >= 1.0, "tightness.max_spread must be >= 1");

        let l = &self.ls_check;
        horizon("ls_check.horizon", l.horizon)?;
        paths("ls_check", l.n_paths)?;
        ensure!(l.tol_fraction.is_finite() && l.tol_fraction >= 0.0, "ls_check.tol_fraction must be >= 0");
        if let Some(tol) = l.tol {
            ensure!(tol.is_finite() && tol >= 0.0, "ls_check.tol must be >= 0");
        }

        let r = &self.rate_study;
        ensure!(r.epsilons.len() >= 3, "rate_study.epsilons needs at least three values");
        for e in &r.epsilons {
            positive("rate_study.epsilons", *e)?;
        }
        ensure!(r.epsilons.windows(2).all(|w| w[1] < w[0]), "rate_study.epsilons must be strictly decreasing");
        horizon("rate_study.horizon", r.horizon)?;
        paths("rate_study", r.n_paths)?;
        ensure!(r.min_slope.is_finite(), "rate_study.min_slope must be finite");

        positive("classify.delta", self.classify.delta)?;

        let o = &self.op_check;
        ensure!(!o.exponents.is_empty() && !o.kappas.is_empty(), "op_check needs exponents and kappas");
        for p in &o.exponents {
            ensure!(p.is_finite() && *p > 1.0, "op_check exponent {p} must be > 1");
        }
        ensure!(o.kappas.iter().all(|k| k.is_finite()), "op_check.kappas must be finite");
        ensure!(o.trials >= 1, "op_check.trials must be >= 1");
        positive("op_check.gradient_step", o.gradient_step)?;
        positive("op_check.slack_tol", o.slack_tol)?;
        positive("op_check.gradient_tol", o.gradient_tol)?;
        Ok(())
    }
}
