//! Uniform tensor grids on the unit interval or square with homogeneous
//! Dirichlet boundary, nodal fields, and the discrete `H = L²` and
//! `V = W^{1,p}_0` norms.
//!
//! Interior nodes are numbered `i + n * j` (x fastest). The zero boundary is
//! never stored; it enters through the edges that connect an interior node to
//! the ghost layer.

use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: usize,
}

/// An edge of the difference stencil. `None` stands for the zero ghost node.
///
/// The forward difference across the edge is `(u[head] - u[tail]) / h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub tail: Option<usize>,
    pub head: Option<usize>,
}

impl Grid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if n == 0 {
            return Err(Error::InvalidResolution(n));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interior nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n + 1) as f64
    }

    /// Total number of interior degrees of freedom, `n^dim`.
    pub fn dof(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Quadrature weight `h^dim` of a single node.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    /// Half bandwidth of the stencil matrices in the natural node ordering.
    pub fn bandwidth(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            self.n
        }
    }

    /// Coordinates of interior node `index`; the second entry is 0 in 1D.
    pub fn coords(&self, index: usize) -> [f64; 2] {
        let h = self.h();
        let ix = index % self.n;
        let iy = index / self.n;
        if self.dim == 1 {
            [(ix + 1) as f64 * h, 0.0]
        } else {
            [(ix + 1) as f64 * h, (iy + 1) as f64 * h]
        }
    }

    /// Per-axis indices of node `index`.
    pub fn multi_index(&self, index: usize) -> [usize; 2] {
        [index % self.n, index / self.n]
    }

    pub fn edge_count(&self) -> usize {
        self.dim * (self.n + 1) * self.n.pow(self.dim as u32 - 1)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        let n = self.n;
        let lines = if self.dim == 1 { 1 } else { n };
        let node = move |axis: usize, line: usize, k: usize| -> usize {
            if axis == 0 {
                k + n * line
            } else {
                line + n * k
            }
        };
        (0..self.dim).flat_map(move |axis| {
            (0..lines).flat_map(move |line| {
                (0..=n).map(move |e| Edge {
                    tail: (e > 0).then(|| node(axis, line, e - 1)),
                    head: (e < n).then(|| node(axis, line, e)),
                })
            })
        })
    }

    /// Sharp constant `C_D` in `‖u‖²_H ≤ C_D ‖u‖²_V` (p = 2), i.e. the
    /// reciprocal of the smallest eigenvalue of the discrete Dirichlet
    /// Laplacian, `dim · 4/h² · sin²(πh/2)`.
    pub fn poincare_embedding_constant(&self) -> f64 {
        1.0 / self.laplacian_min_eigenvalue()
    }

    pub fn laplacian_min_eigenvalue(&self) -> f64 {
        let h = self.h();
        let s = (PI * h / 2.0).sin();
        self.dim as f64 * 4.0 / (h * h) * s * s
    }

    /// The L²-normalised first Dirichlet eigenvector, sampled at the nodes.
    pub fn first_eigenvector(&self) -> Field {
        Field::from_fn(*self, |x| {
            let mut v = 2f64.sqrt() * (PI * x[0]).sin();
            if self.dim == 2 {
                v *= 2f64.sqrt() * (PI * x[1]).sin();
            }
            v
        })
    }
}

/// Nodal values of a function on the interior nodes of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.dof()] }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.dof()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.dof() {
            return Err(Error::LengthMismatch { expected: grid.dof(), got: values.len() });
        }
        let field = Self { grid, values };
        field.check_finite()?;
        Ok(field)
    }

    /// Samples `f` at the node coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.dof()).map(|i| f(grid.coords(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index, value: self.values[index] }),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Field { grid: self.grid, values })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    /// Nodal positive part `max(u, 0)`.
    pub fn positive_part(&self) -> Field {
        self.map(|v| v.max(0.0))
    }

    /// Nodal negative part `max(-u, 0)`.
    pub fn negative_part(&self) -> Field {
        self.map(|v| (-v).max(0.0))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Discrete `H = L²(D)` norm `(h^dim Σ u_i²)^{1/2}`.
    pub fn norm_h(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn inner_h(&self, other: &Field) -> Result<f64> {
        self.same_grid(other)?;
        Ok(self.grid.cell_volume() * dot(&self.values, &other.values))
    }

    /// Discrete `W^{1,p}_0` norm over all edges, boundary edges included.
    pub fn norm_vp(&self, p: f64) -> Result<f64> {
        Ok(self.norm_vp_pow(p)?.powf(1.0 / p))
    }

    /// `‖u‖_V^p = h^dim Σ_e |D^e u|^p`.
    pub fn norm_vp_pow(&self, p: f64) -> Result<f64> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::InvalidExponent(p));
        }
        let sum: f64 = self.edge_differences().map(|g| g.abs().powf(p)).sum();
        Ok(self.grid.cell_volume() * sum)
    }

    /// Forward differences across every edge, in `Grid::edges` order.
    pub fn edge_differences(&self) -> impl Iterator<Item = f64> + '_ {
        let inv_h = 1.0 / self.grid.h();
        self.grid.edges().map(move |e| (self.at(e.head) - self.at(e.tail)) * inv_h)
    }

    #[inline]
    pub(crate) fn at(&self, node: Option<usize>) -> f64 {
        node.map_or(0.0, |i| self.values[i])
    }

    /// Writes one row per node: axis indices then value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.grid.dim == 1 {
            writeln!(w, "i,value")?;
        } else {
            writeln!(w, "i,j,value")?;
        }
        for (k, v) in self.values.iter().enumerate() {
            let [i, j] = self.grid.multi_index(k);
            if self.grid.dim == 1 {
                writeln!(w, "{i},{v}")?;
            } else {
                writeln!(w, "{i},{j},{v}")?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(grid: Grid, r: R) -> Result<Field> {
        let mut values = vec![f64::NAN; grid.dof()];
        let mut seen = vec![false; grid.dof()];
        let mut lines = r.lines();
        lines.next().transpose()?.ok_or_else(|| Error::Format("missing header".into()))?;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != grid.dim + 1 {
                return Err(Error::Format(format!("expected {} columns: {line}", grid.dim + 1)));
            }
            let parse_idx = |s: &str| -> Result<usize> {
                let i: usize = s.parse().map_err(|_| Error::Format(format!("bad index '{s}'")))?;
                if i >= grid.n {
                    return Err(Error::Format(format!("index {i} out of range")));
                }
                Ok(i)
            };
            let i = parse_idx(cols[0])?;
            let j = if grid.dim == 2 { parse_idx(cols[1])? } else { 0 };
            let v: f64 = cols[grid.dim]
                .parse()
                .map_err(|_| Error::Format(format!("bad value '{}'", cols[grid.dim])))?;
            let k = i + grid.n * j;
            values[k] = v;
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("node {k} missing")));
        }
        Field::from_values(grid, values)
    }

    /// Flat little-endian binary: 16-byte header (dim, n as u64) then values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.grid.dim as u64).to_le_bytes())?;
        w.write_all(&(self.grid.n as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Field> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let dim = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let grid = Grid::new(dim, n)?;
        let mut values = Vec::with_capacity(grid.dof());
        for _ in 0..grid.dof() {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Field::from_values(grid, values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
