//! Symmetric banded matrices: the Jacobians of the implicit step are
//! tridiagonal in 1D and have half bandwidth `n` in 2D.

/// Lower band storage: `entry(i, i - k)` for `k = 0..=bandwidth`.
#[derive(Clone, Debug)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = i - j;
        (k <= self.bw).then_some(i * (self.bw + 1) + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside band");
        self.data[s] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * (self.bw + 1)] += v;
        }
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = i * (self.bw + 1);
            y[i] += self.data[row] * x[i];
            for k in 1..=self.bw.min(i) {
                let a = self.data[row + k];
                y[i] += a * x[i - k];
                y[i - k] += a * x[i];
            }
        }
        y
    }

    /// Sum over the off-diagonal entries of row `i` of `A[i][j] x[j]`.
    pub fn row_off_diagonal_dot(&self, i: usize, x: &[f64]) -> f64 {
        let lo = i.saturating_sub(self.bw);
        let hi = (i + self.bw).min(self.n - 1);
        let mut s = 0.0;
        for j in lo..=hi {
            if j != i {
                s += self.get(i, j) * x[j];
            }
        }
        s
    }

    /// Replaces rows and columns in `mask` by the identity, moving the
    /// coupling to known values `fixed[j]` onto the right-hand side.
    pub fn eliminate(&mut self, mask: &[bool], fixed: &[f64], rhs: &mut [f64]) {
        for i in 0..self.n {
            let row = i * (self.bw + 1);
            for k in 1..=self.bw.min(i) {
                let j = i - k;
                let a = self.data[row + k];
                match (mask[i], mask[j]) {
                    (false, true) => rhs[i] -= a * fixed[j],
                    (true, false) => rhs[j] -= a * fixed[i],
                    _ => {}
                }
                if mask[i] || mask[j] {
                    self.data[row + k] = 0.0;
                }
            }
        }
        for i in 0..self.n {
            if mask[i] {
                self.data[i * (self.bw + 1)] = 1.0;
                rhs[i] = fixed[i];
            }
        }
    }

    /// In-place `LDLᵀ` factorisation. Returns `None` on a non-positive pivot.
    pub fn factor(mut self) -> Option<BandedLdl> {
        let bw = self.bw;
        let w = bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            for j in lo..i {
                // L[i][j] * D[j] = A[i][j] - Σ_{k<j} L[i][k] D[k] L[j][k]
                let mut s = self.data[i * w + (i - j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= self.data[i * w + (i - k)] * self.data[k * w] * self.data[j * w + (j - k)];
                }
                self.data[i * w + (i - j)] = s / self.data[j * w];
            }
            let mut d = self.data[i * w];
            for k in lo..i {
                let l = self.data[i * w + (i - k)];
                d -= l * l * self.data[k * w];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            self.data[i * w] = d;
        }
        Some(BandedLdl { m: self })
    }
}

#[derive(Clone, Debug)]
pub struct BandedLdl {
    m: BandedSym,
}

impl BandedLdl {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let BandedSym { n, bw, ref data } = self.m;
        let w = bw + 1;
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= data[i * w + (i - k)] * x[k];
            }
            x[i] = s;
        }
        for i in 0..n {
            x[i] /= data[i * w];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..=(i + bw).min(n - 1) {
                s -= data[k * w + (k - i)] * x[k];
            }
            x[i] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, bw: usize, rng: &mut ChaCha8Rng) -> BandedSym {
        let mut a = BandedSym::zeros(n, bw);
        for i in 0..n {
            for k in 1..=bw.min(i) {
                a.add(i, i - k, rng.random_range(-1.0..1.0));
            }
        }
        // diagonal dominance
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| a.get(i, j).abs()).sum();
            a.add(i, i, off + 0.5);
        }
        a
    }

    #[test]
    fn solves_random_banded_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, bw) in [(1, 1), (7, 1), (30, 4), (25, 5)] {
            let a = random_spd(n, bw, &mut rng);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = a.mul_vec(&x);
            let f = a.clone().factor().unwrap();
            let mut y = b.clone();
            f.solve_in_place(&mut y);
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn eliminate_keeps_solution_on_free_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let a = random_spd(n, 3, &mut rng);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut b = a.mul_vec(&x);
        let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let mut reduced = a.clone();
        reduced.eliminate(&mask, &x, &mut b);
        let f = reduced.factor().unwrap();
        f.solve_in_place(&mut b);
        for (u, v) in x.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = BandedSym::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(a.factor().is_none());
    }
}
