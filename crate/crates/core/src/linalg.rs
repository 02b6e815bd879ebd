//! Dense square matrices and Cholesky factorization for the small (d <= ~64)
//! covariance matrices used by the second-order measures.

use crate::error::{Error, Result};

/// Square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.n, other.n);
        Matrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Adds `eps * (tr/d) * I`, or `eps * I` when the trace is zero.
    pub fn ridge(&self, eps: f64) -> Matrix {
        if eps == 0.0 {
            return self.clone();
        }
        let tr = self.trace();
        let scale = if tr > 0.0 { tr / self.n as f64 } else { 1.0 };
        let mut out = self.clone();
        for i in 0..self.n {
            out[(i, i)] += eps * scale;
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Lower-triangular factor `L` with `A = L L^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Fails with `SingularCovariance` unless `a` is numerically positive definite.
    /// Only the lower triangle of `a` is read.
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.dim();
        let mut l = Matrix::zeros(n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag.is_finite() && diag > 0.0) {
                return Err(Error::SingularCovariance);
            }
            let pivot = diag.sqrt();
            l[(j, j)] = pivot;
            for i in j + 1..n {
                let mut acc = a[(i, j)];
                for k in 0..j {
                    acc -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = acc / pivot;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.dim()
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    /// `ln |A|` as twice the sum of log pivots.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L y = b`.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[(i, k)] * y[k];
            }
            y[i] = acc / self.l[(i, i)];
        }
        y
    }

    /// `x^t A^-1 x = |L^-1 x|^2`.
    pub fn inv_quad_form(&self, x: &[f64]) -> f64 {
        self.solve_lower(x).iter().map(|v| v * v).sum()
    }

    /// `tr(B A^-1)` where `self` factors `A` and `other` factors `B`.
    ///
    /// Evaluated as the squared Frobenius norm of `L_A^-1 L_B`, so the result is a
    /// sum of squares and equals `d` exactly when both factors are identical.
    #[allow(clippy::needless_range_loop)]
    pub fn trace_of_other_times_inverse(&self, other: &Cholesky) -> f64 {
        let n = self.dim();
        debug_assert_eq!(n, other.dim());
        let mut total = 0.0;
        let mut x = vec![0.0; n];
        for j in 0..n {
            // column j of L_B is zero above row j, so is column j of the solution
            for i in j..n {
                let mut acc = other.l[(i, j)];
                for k in j..i {
                    acc -= self.l[(i, k)] * x[k];
                }
                x[i] = acc / self.l[(i, i)];
            }
            for v in &x[j..] {
                total += v * v;
            }
        }
        total
    }
}
