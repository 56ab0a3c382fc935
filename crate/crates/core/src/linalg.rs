//! Normal-equation storage and solvers for spline problems.
//!
//! Every spline measurement touches `order` consecutive knots, so the
//! knot block of `JᵀJ` is banded. Global parameters (the IMU bias) couple
//! to every knot and form a dense border. The system is stored as
//!
//! ```text
//! [ A  B ]   A: n×n banded, half-bandwidth w
//! [ Bᵀ C ]   B: n×m dense border, C: m×m dense corner
//! ```
//!
//! and solved with a banded Cholesky factorization of `A` plus a Schur
//! complement on `C`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ArrowSystem {
    n: usize,
    w: usize,
    m: usize,
    /// Lower band of `A`, row-major, `band[i * (w + 1) + (i - j)]`.
    band: Vec<f64>,
    /// `B`, row-major `n × m`.
    border: Vec<f64>,
    /// Lower-or-full `C`, row-major `m × m` (kept symmetric).
    corner: Vec<f64>,
    /// `Jᵀ r`.
    gradient: Vec<f64>,
}

impl ArrowSystem {
    pub fn new(n: usize, half_bandwidth: usize, border: usize) -> Self {
        let w = half_bandwidth;
        ArrowSystem {
            n,
            w,
            m: border,
            band: vec![0.0; n * (w + 1)],
            border: vec![0.0; n * border],
            corner: vec![0.0; border * border],
            gradient: vec![0.0; n + border],
        }
    }

    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub fn clear(&mut self) {
        self.band.iter_mut().for_each(|v| *v = 0.0);
        self.border.iter_mut().for_each(|v| *v = 0.0);
        self.corner.iter_mut().for_each(|v| *v = 0.0);
        self.gradient.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `H[i][j]` (and its symmetric partner) for `i ≥ j`.
    fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j);
        if j >= self.n {
            let (a, b) = (i - self.n, j - self.n);
            self.corner[a * self.m + b] += v;
            if a != b {
                self.corner[b * self.m + a] += v;
            }
        } else if i >= self.n {
            self.border[j * self.m + (i - self.n)] += v;
        } else {
            assert!(i - j <= self.w, "entry ({i}, {j}) outside band {}", self.w);
            self.band[i * (self.w + 1) + (i - j)] += v;
        }
    }

    /// Accumulates `weight · JᵀJ` and `weight · Jᵀr` for a residual block
    /// whose Jacobian `jac` (row-major, `residual.len() × cols.len()`)
    /// touches the global parameters listed in `cols`.
    pub fn accumulate(&mut self, cols: &[usize], jac: &[f64], residual: &[f64], weight: f64) {
        let nc = cols.len();
        debug_assert_eq!(jac.len(), residual.len() * nc);
        for (a, &ca) in cols.iter().enumerate() {
            let mut g = 0.0;
            for (r, res) in residual.iter().enumerate() {
                g += jac[r * nc + a] * res;
            }
            self.gradient[ca] += weight * g;
            for (b, &cb) in cols.iter().enumerate().take(a + 1) {
                let mut h = 0.0;
                for r in 0..residual.len() {
                    h += jac[r * nc + a] * jac[r * nc + b];
                }
                if h == 0.0 {
                    continue;
                }
                if ca >= cb {
                    self.add_lower(ca, cb, weight * h);
                } else {
                    self.add_lower(cb, ca, weight * h);
                }
            }
        }
    }

    /// Adds `value` to the diagonal entry `i` (prior/regularizer terms).
    pub fn add_diagonal(&mut self, i: usize, value: f64) {
        self.add_lower(i, i, value);
    }

    pub fn add_gradient(&mut self, i: usize, value: f64) {
        self.gradient[i] += value;
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        if i >= self.n {
            let a = i - self.n;
            self.corner[a * self.m + a]
        } else {
            self.band[i * (self.w + 1)]
        }
    }

    /// Copy of the system with Marquardt damping
    /// `H + λ·diag(max(H_ii, floor))`.
    pub fn damped(&self, lambda: f64, floor: f64) -> ArrowSystem {
        let mut out = self.clone();
        for i in 0..self.dim() {
            let d = self.diagonal(i).max(floor);
            out.add_diagonal(i, lambda * d);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..self.n {
            for j in i.saturating_sub(self.w)..=i {
                let v = self.band[i * (self.w + 1) + (i - j)];
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            for b in 0..self.m {
                let v = self.border[i * self.m + b];
                h[(i, self.n + b)] = v;
                h[(self.n + b, i)] = v;
            }
        }
        for a in 0..self.m {
            for b in 0..self.m {
                h[(self.n + a, self.n + b)] = self.corner[a * self.m + b];
            }
        }
        h
    }

    /// Solves `H x = rhs` by dense Cholesky.
    pub fn solve_dense(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let chol = self.to_dense().cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec())
    }

    /// Solves `H x = rhs` exploiting the band + border structure.
    pub fn solve_banded(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        let factor = BandCholesky::factor(n, self.w, &self.band)?;
        let mut x1 = rhs[..n].to_vec();
        factor.solve_in_place(&mut x1);
        if m == 0 {
            return Ok(x1);
        }
        // Z = A⁻¹ B, column by column.
        let mut z = vec![vec![0.0; n]; m];
        for (b, col) in z.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = self.border[i * m + b];
            }
            factor.solve_in_place(col);
        }
        let mut schur = DMatrix::from_row_slice(m, m, &self.corner);
        let mut reduced = DVector::from_column_slice(&rhs[n..]);
        for a in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.border[i * m + a] * x1[i];
            }
            reduced[a] -= acc;
            for (b, zb) in z.iter().enumerate() {
                let mut s = 0.0;
                for i in 0..n {
                    s += self.border[i * m + a] * zb[i];
                }
                schur[(a, b)] -= s;
            }
        }
        let y = schur
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .solve(&reduced);
        for (b, zb) in z.iter().enumerate() {
            for i in 0..n {
                x1[i] -= zb[i] * y[b];
            }
        }
        x1.extend(y.iter());
        Ok(x1)
    }
}

/// `A = L Lᵀ` for a symmetric positive definite band matrix.
struct BandCholesky {
    n: usize,
    w: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    fn factor(n: usize, w: usize, band: &[f64]) -> Result<Self> {
        let stride = w + 1;
        let mut l = band.to_vec();
        for j in 0..n {
            let lo = j.saturating_sub(w);
            let mut d = l[j * stride];
            for k in lo..j {
                let v = l[j * stride + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite);
            }
            let d = d.sqrt();
            l[j * stride] = d;
            for i in (j + 1)..n.min(j + w + 1) {
                let lo = i.saturating_sub(w);
                let mut s = l[i * stride + (i - j)];
                for k in lo..j {
                    s -= l[i * stride + (i - k)] * l[j * stride + (j - k)];
                }
                l[i * stride + (i - j)] = s / d;
            }
        }
        Ok(BandCholesky { n, w, l })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let stride = self.w + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.w)..i {
                s -= self.l[i * stride + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * stride];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in (i + 1)..self.n.min(i + self.w + 1) {
                s -= self.l[k * stride + (k - i)] * b[k];
            }
            b[i] = s / self.l[i * stride];
        }
    }
}
