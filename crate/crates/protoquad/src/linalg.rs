//! Small dense linear algebra over any [`Real`] scalar.
//!
//! Row-major matrices plus the three factorizations the rest of the crate
//! needs: Cholesky (SPD solves), cyclic Jacobi (symmetric eigenproblems at
//! diagnostic sizes) and Gauss-Jordan (fallback inversion of matrices that
//! are not numerically SPD). Everything here is deliberately unblocked and
//! allocation-happy; problem sizes are bounded by parameter counts and
//! selection budgets, not dataset sizes.

use crate::num::Real;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<R> {
    nrows: usize,
    ncols: usize,
    data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Matrix {
            nrows,
            ncols,
            data: vec![R::zero(); nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, R::one());
        }
        m
    }

    pub fn from_fn(nrows: usize, ncols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in 0..nrows {
            for j in 0..ncols {
                data.push(f(i, j));
            }
        }
        Matrix { nrows, ncols, data }
    }

    /// Build from row vectors. Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for row in rows {
            assert_eq!(row.len(), ncols, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { nrows, ncols, data }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.ncols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.ncols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    pub fn matvec(&self, x: &[R]) -> Vec<R> {
        assert_eq!(x.len(), self.ncols, "matvec dimension mismatch");
        (0..self.nrows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn matmul(&self, other: &Matrix<R>) -> Matrix<R> {
        assert_eq!(self.ncols, other.nrows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for k in 0..self.ncols {
                let aik = self.get(i, k);
                if aik == R::zero() {
                    continue;
                }
                for j in 0..other.ncols {
                    let v = out.get(i, j) + aik * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<R> {
        Matrix::from_fn(self.ncols, self.nrows, |i, j| self.get(j, i))
    }

    /// Principal submatrix on the given (sorted or not) index support.
    pub fn principal(&self, support: &[usize]) -> Matrix<R> {
        Matrix::from_fn(support.len(), support.len(), |i, j| {
            self.get(support[i], support[j])
        })
    }

    /// Grow a square matrix by one symmetric border row/column.
    pub fn push_border(&self, b: &[R], c: R) -> Matrix<R> {
        let n = self.nrows;
        assert!(
            self.is_square() && b.len() == n,
            "border dimension mismatch"
        );
        Matrix::from_fn(n + 1, n + 1, |i, j| match (i == n, j == n) {
            (false, false) => self.get(i, j),
            (true, false) => b[j],
            (false, true) => b[i],
            (true, true) => c,
        })
    }

    pub fn frobenius_norm(&self) -> R {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(R::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn max_abs_entry(&self) -> R {
        self.data.iter().fold(R::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: R) -> Matrix<R> {
        Matrix {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// `self + s * I`.
    pub fn plus_scaled_identity(&self, s: R) -> Matrix<R> {
        assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.nrows {
            out.set(i, i, out.get(i, i) + s);
        }
        out
    }

    pub fn trace(&self) -> R {
        assert!(self.is_square());
        (0..self.nrows).map(|i| self.get(i, i)).sum()
    }
}

pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2<R: Real>(v: &[R]) -> R {
    dot(v, v).sqrt()
}

pub fn norm_inf<R: Real>(v: &[R]) -> R {
    v.iter().fold(R::zero(), |acc, &x| acc.max(x.abs()))
}

/// Infinity norm (max row sum) of `a * b - I`.
pub fn inverse_residual_inf<R: Real>(a: &Matrix<R>, b: &Matrix<R>) -> R {
    assert!(a.is_square() && b.is_square() && a.nrows() == b.nrows());
    let n = a.nrows();
    let mut worst = R::zero();
    for i in 0..n {
        let mut row_sum = R::zero();
        for j in 0..n {
            let mut v = if i == j { -R::one() } else { R::zero() };
            for k in 0..n {
                v = v + a.get(i, k) * b.get(k, j);
            }
            row_sum = row_sum + v.abs();
        }
        worst = worst.max(row_sum);
    }
    worst
}

/// Errors local to factorizations; callers map them onto crate errors with
/// whatever context they have.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FactorError {
    NotSquare,
    /// Leading minor of this order is not positive definite.
    NotPositiveDefinite(usize),
    /// Gauss-Jordan hit a zero pivot at this column.
    SingularPivot(usize),
}

impl std::fmt::Display for FactorError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FactorError::NotSquare => write!(f, "matrix is not square"),
            FactorError::NotPositiveDefinite(k) => {
                write!(
                    f,
                    "leading minor of order {} is not positive definite",
                    k + 1
                )
            }
            FactorError::SingularPivot(k) => write!(f, "zero pivot at column {k}"),
        }
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<R> {
    l: Matrix<R>,
}

impl<R: Real> Cholesky<R> {
    pub fn factor(a: &Matrix<R>) -> Result<Self, FactorError> {
        if !a.is_square() {
            return Err(FactorError::NotSquare);
        }
        let n = a.nrows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for k in 0..j {
                let ljk = l.get(j, k);
                diag = diag - ljk * ljk;
            }
            if !(diag > R::zero()) || !diag.is_finite() {
                return Err(FactorError::NotPositiveDefinite(j));
            }
            let diag = diag.sqrt();
            l.set(j, j, diag);
            for i in (j + 1)..n {
                let mut v = a.get(i, j);
                for k in 0..j {
                    v = v - l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v / diag);
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `L y = b` (forward substitution only). `y` is the metric
    /// half-solve used to whiten embeddings.
    pub fn forward(&self, b: &[R]) -> Vec<R> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = vec![R::zero(); n];
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v = v - self.l.get(i, k) * y[k];
            }
            y[i] = v / self.l.get(i, i);
        }
        y
    }

    /// Solve `A x = b` where `A = L L^T`.
    pub fn solve(&self, b: &[R]) -> Vec<R> {
        let n = self.dim();
        let y = self.forward(b);
        let mut x = vec![R::zero(); n];
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v = v - self.l.get(k, i) * x[k];
            }
            x[i] = v / self.l.get(i, i);
        }
        x
    }

    pub fn inverse(&self) -> Matrix<R> {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        let mut e = vec![R::zero(); n];
        for j in 0..n {
            e[j] = R::one();
            let col = self.solve(&e);
            e[j] = R::zero();
            for i in 0..n {
                out.set(i, j, col[i]);
            }
        }
        out
    }
}

/// Invert via Gauss-Jordan with partial pivoting. Used when a matrix is
/// square but not reliably SPD.
pub fn gauss_jordan_inverse<R: Real>(a: &Matrix<R>) -> Result<Matrix<R>, FactorError> {
    if !a.is_square() {
        return Err(FactorError::NotSquare);
    }
    let n = a.nrows();
    let mut work = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = work.get(col, col).abs();
        for r in (col + 1)..n {
            let v = work.get(r, col).abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val == R::zero() || !pivot_val.is_finite() {
            return Err(FactorError::SingularPivot(col));
        }
        if pivot_row != col {
            for j in 0..n {
                let a1 = work.get(col, j);
                let a2 = work.get(pivot_row, j);
                work.set(col, j, a2);
                work.set(pivot_row, j, a1);
                let b1 = inv.get(col, j);
                let b2 = inv.get(pivot_row, j);
                inv.set(col, j, b2);
                inv.set(pivot_row, j, b1);
            }
        }
        let pivot = work.get(col, col);
        for j in 0..n {
            work.set(col, j, work.get(col, j) / pivot);
            inv.set(col, j, inv.get(col, j) / pivot);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work.get(r, col);
            if factor == R::zero() {
                continue;
            }
            for j in 0..n {
                work.set(r, j, work.get(r, j) - factor * work.get(col, j));
                inv.set(r, j, inv.get(r, j) - factor * inv.get(col, j));
            }
        }
    }
    Ok(inv)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen<R> {
    /// Ascending eigenvalues.
    pub values: Vec<R>,
    /// Column `j` is the eigenvector for `values[j]`.
    pub vectors: Matrix<R>,
}

/// Cyclic Jacobi rotations. Fine for the symmetric problems this crate
/// solves (parameter-space metrics and principal kernel submatrices).
pub fn sym_eigen<R: Real>(a: &Matrix<R>) -> SymEigen<R> {
    assert!(a.is_square(), "sym_eigen needs a square matrix");
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    if n <= 1 {
        return SymEigen {
            values: (0..n).map(|i| m.get(i, i)).collect(),
            vectors: v,
        };
    }
    let eps = R::epsilon() * R::of(n as f64);
    let scale = m.frobenius_norm().max(R::one());
    for _sweep in 0..60 {
        let mut off = R::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= eps * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= R::epsilon() * scale {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (R::of(2.0) * apq);
                let t = {
                    let denom = tau.abs() + (R::one() + tau * tau).sqrt();
                    if tau >= R::zero() {
                        R::one() / denom
                    } else {
                        -R::one() / denom
                    }
                };
                let c = R::one() / (R::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m.get(i, i)
            .partial_cmp(&m.get(j, j))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    SymEigen { values, vectors }
}
