//! Thin dense linear-algebra layer over `faer`.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{ColRef, Mat, MatRef, Side};

use crate::error::{DlimError, Result};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let (ar, ac) = (a.nrows(), a.ncols());
    let (br, bc) = (b.nrows(), b.ncols());
    Mat::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Kronecker product of two vectors, `a ⊗ b` (index `i * b.len() + j`).
pub fn kron_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &ai in a {
        out.extend(b.iter().map(|&bj| ai * bj));
    }
    out
}

pub fn matvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += a[(i, j)] * xj;
        }
    }
    out
}

/// `a' x`.
pub fn tmatvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), x.len());
    (0..a.ncols())
        .map(|j| {
            let col = a.col(j);
            (0..a.nrows()).map(|i| col[i] * x[i]).sum()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a' x a` for symmetric `x`.
pub fn quad_form(x: MatRef<'_, f64>, a: &[f64]) -> f64 {
    dot(a, &matvec(x, a))
}

pub fn is_symmetric(a: MatRef<'_, f64>, tol: f64) -> bool {
    a.nrows() == a.ncols()
        && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

/// Cholesky factorization of a symmetric positive-definite matrix.
pub struct Cholesky {
    llt: Llt<f64>,
    log_det: f64,
}

impl Cholesky {
    pub fn new(a: MatRef<'_, f64>) -> Result<Self> {
        let llt = a
            .llt(Side::Lower)
            .map_err(|_| DlimError::Numerical("matrix is not positive definite".into()))?;
        let l = llt.L();
        let log_det = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(DlimError::Numerical("singular Cholesky factor".into()));
        }
        Ok(Self { llt, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = ColRef::from_slice(b);
        let sol = self.llt.solve(rhs);
        (0..sol.nrows()).map(|i| sol[i]).collect()
    }

    pub fn inverse(&self) -> Mat<f64> {
        let inv = self.llt.inverse();
        // symmetrize away rounding asymmetry
        let n = inv.nrows();
        Mat::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]))
    }
}

/// Symmetric eigen-decomposition; eigenvalues ascending, eigenvectors in columns.
pub fn sym_eigen(a: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| DlimError::Numerical("eigen-decomposition did not converge".into()))?;
    let s = evd.S();
    let values = (0..a.nrows()).map(|i| s.column_vector()[i]).collect();
    Ok((values, evd.U().to_owned()))
}

pub fn sym_eigenvalues(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| DlimError::Numerical("eigen-decomposition did not converge".into()))
}

/// Numerical column rank from a column-pivoted QR decomposition.
pub fn column_rank(a: MatRef<'_, f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let qr = a.col_piv_qr();
    let r = qr.R();
    let k = r.nrows().min(r.ncols());
    let lead = r[(0, 0)].abs();
    if lead == 0.0 {
        return 0;
    }
    (0..k).filter(|&i| r[(i, i)].abs() > rel_tol * lead).count()
}

/// Sparse column view of a symmetric block placed at `offset` inside a
/// larger coefficient vector.
#[derive(Debug, Clone)]
pub struct SparseBlock {
    pub offset: usize,
    pub dim: usize,
    /// For each local column, the nonzero `(local_row, value)` pairs.
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl SparseBlock {
    pub fn from_dense(local: MatRef<'_, f64>, offset: usize) -> Self {
        let dim = local.ncols();
        let cols = (0..dim)
            .map(|j| {
                (0..local.nrows())
                    .filter_map(|i| {
                        let v = local[(i, j)];
                        (v != 0.0).then_some((i, v))
                    })
                    .collect()
            })
            .collect();
        Self { offset, dim, cols }
    }

    /// `S x` for a full-length vector `x` (result full length, zero outside the block).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (j, col) in self.cols.iter().enumerate() {
            let xj = x[self.offset + j];
            if xj == 0.0 {
                continue;
            }
            for &(i, v) in col {
                out[self.offset + i] += v * xj;
            }
        }
        out
    }

    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.apply(x))
    }

    /// Adds `scale * S` into the dense matrix `m`.
    pub fn add_into(&self, m: &mut Mat<f64>, scale: f64) {
        for (j, col) in self.cols.iter().enumerate() {
            for &(i, v) in col {
                m[(self.offset + i, self.offset + j)] += scale * v;
            }
        }
    }

    /// `A S` for a dense square `a`; columns outside the block are zero.
    pub fn right_mul(&self, a: MatRef<'_, f64>) -> Mat<f64> {
        let n = a.nrows();
        let mut out = Mat::<f64>::zeros(n, a.ncols());
        for (j, col) in self.cols.iter().enumerate() {
            let dst = self.offset + j;
            for &(i, v) in col {
                let src = a.col(self.offset + i);
                for r in 0..n {
                    out[(r, dst)] += src[r] * v;
                }
            }
        }
        out
    }

    /// `tr(A S)`.
    pub fn trace_with(&self, a: MatRef<'_, f64>) -> f64 {
        let mut t = 0.0;
        for (j, col) in self.cols.iter().enumerate() {
            for &(i, v) in col {
                t += a[(self.offset + j, self.offset + i)] * v;
            }
        }
        t
    }
}

/// Type-7 sample quantile (linear interpolation between order statistics)
/// of already sorted values.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Type-7 sample quantile of unsorted values.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

/// `tr(A B)` for square matrices of equal size.
pub fn trace_product(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let n = a.nrows();
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}
