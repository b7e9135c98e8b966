//! CSV tables for experiment reports and trajectories. Numbers are written
//! with the shortest representation that round-trips, so equal values give
//! equal bytes.

use std::io::Write;

use crate::ergodic::{
    CouplingFit, EquilibriumGap, ErgodicEstimate, LsReport, RateStudy, RegimeReport, TightnessScan,
};
use crate::error::Result;
use crate::grid::Field;
use crate::stepper::Trajectory;

/// A rectangular table with a header row.
pub trait Table {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn strs(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_csv(table: &dyn Table, mut w: impl Write) -> Result<()> {
    writeln!(w, "{}", table.header().join(","))?;
    for row in table.rows() {
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn csv_string(table: &dyn Table) -> String {
    let mut buf = Vec::new();
    write_csv(table, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

impl Table for RegimeReport {
    fn header(&self) -> Vec<String> {
        strs(&["k", "cond_invariant_slack", "gamma_condition_slack"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.per_k
            .iter()
            .map(|s| vec![num(s.k), num(s.cond_invariant), num(s.gamma_condition)])
            .collect()
    }
}

impl Table for CouplingFit {
    fn header(&self) -> Vec<String> {
        strs(&["t", "mean_sq_gap", "stderr", "bound"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.times.len())
            .map(|i| {
                vec![num(self.times[i]), num(self.mean_sq_gap[i]), num(self.stderr[i]), num(self.bound[i])]
            })
            .collect()
    }
}

impl Table for ErgodicEstimate {
    fn header(&self) -> Vec<String> {
        strs(&["initial", "path", "time_average"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (j, est) in self.per_initial.iter().enumerate() {
            for (i, v) in est.path_values.iter().enumerate() {
                rows.push(vec![j.to_string(), i.to_string(), num(*v)]);
            }
        }
        rows
    }
}

impl Table for EquilibriumGap {
    fn header(&self) -> Vec<String> {
        strs(&["t", "transition", "transition_stderr", "gap", "gap_stderr", "above_noise"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.times.len())
            .map(|i| {
                vec![
                    num(self.times[i]),
                    num(self.transition[i]),
                    num(self.transition_stderr[i]),
                    num(self.gap[i]),
                    num(self.gap_stderr[i]),
                    self.above_noise[i].to_string(),
                ]
            })
            .collect()
    }
}

impl Table for TightnessScan {
    fn header(&self) -> Vec<String> {
        strs(&["horizon", "running_average", "stderr"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.horizons.len())
            .map(|i| vec![num(self.horizons[i]), num(self.running_average[i]), num(self.stderr[i])])
            .collect()
    }
}

impl Table for LsReport {
    fn header(&self) -> Vec<String> {
        strs(&["max_violation_lower", "max_violation_upper", "max_reaction", "h_minus_sup", "tol", "pass"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            num(self.max_violation_lower),
            num(self.max_violation_upper),
            num(self.max_reaction),
            num(self.h_minus_sup),
            num(self.tol),
            self.pass.to_string(),
        ]]
    }
}

impl Table for RateStudy {
    fn header(&self) -> Vec<String> {
        strs(&["epsilon", "error", "stderr", "above_floor"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.epsilons.len())
            .map(|i| {
                vec![
                    num(self.epsilons[i]),
                    num(self.errors[i]),
                    num(self.error_stderr[i]),
                    (self.errors[i] > self.floor).to_string(),
                ]
            })
            .collect()
    }
}

/// Per-time summary of a trajectory:
/// `t, ‖u‖_H, ‖u‖_V^p, min(u - ψ), ‖k‖_∞`.
pub struct TrajectorySummary<'a> {
    pub trajectory: &'a Trajectory,
    pub psi: &'a Field,
    pub p: f64,
}

impl Table for TrajectorySummary<'_> {
    fn header(&self) -> Vec<String> {
        strs(&["t", "norm_h", "norm_v_pow_p", "min_gap", "multiplier_sup"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let tr = self.trajectory;
        tr.times
            .iter()
            .zip(&tr.states)
            .zip(&tr.multipliers)
            .map(|((t, u), k)| {
                let min_gap = u
                    .values()
                    .iter()
                    .zip(self.psi.values())
                    .map(|(a, b)| a - b)
                    .fold(f64::INFINITY, f64::min);
                vec![
                    num(*t),
                    num(u.norm_h()),
                    opt(u.norm_vp_pow(self.p).ok()),
                    num(min_gap),
                    num(k.sup_norm()),
                ]
            })
            .collect()
    }
}

/// Full trajectory in long form: `t, node, value`.
pub struct TrajectoryStates<'a>(pub &'a Trajectory);

impl Table for TrajectoryStates<'_> {
    fn header(&self) -> Vec<String> {
        strs(&["t", "node", "value"])
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (t, u) in self.0.times.iter().zip(&self.0.states) {
            for (i, v) in u.values().iter().enumerate() {
                rows.push(vec![num(*t), i.to_string(), num(*v)]);
            }
        }
        rows
    }
}
