//! Dense symmetric kernels used by the estimators and policies.
//!
//! Matrices here are small (d up to a few hundred) and always regularized
//! with a positive diagonal before any solve, so a Cholesky factorization is
//! the workhorse. Eigendecomposition is only used for [`inv_sqrt`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
}

/// Relative tolerance accepted by [`SymMatrix::from_matrix`].
const SYMMETRY_TOL: f64 = 1e-12;

/// A dense symmetric `d x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    /// `scale * I_d`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self {
            inner: DMatrix::from_diagonal_element(dim, dim, scale),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            inner: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    /// Wraps `m` after checking it is square and symmetric to within `1e-12`
    /// relative tolerance. The stored matrix is the exact symmetrization.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(LinalgError::NotSymmetric(asym));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self { inner: sym })
    }

    /// Row-major constructor, mostly for tests and small literals.
    pub fn from_rows(dim: usize, rows: &[f64]) -> Result<Self, LinalgError> {
        if rows.len() != dim * dim {
            return Err(LinalgError::DimensionMismatch {
                expected: dim * dim,
                got: rows.len(),
            });
        }
        Self::from_matrix(DMatrix::from_row_slice(dim, dim, rows))
    }

    /// Builds from a matrix known to be symmetric (e.g. accumulated from
    /// symmetric updates). Only the upper triangle is read.
    pub(crate) fn from_upper(mut m: DMatrix<f64>) -> Self {
        let d = m.nrows();
        for j in 0..d {
            for i in (j + 1)..d {
                m[(i, j)] = m[(j, i)];
            }
        }
        Self { inner: m }
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.inner * x
    }

    /// In-place `A += w x x^T`, writing both triangles from the same product
    /// so symmetry is exact.
    pub fn add_outer(&mut self, x: &DVector<f64>, w: f64) {
        self.add_outer_slice(x.as_slice(), w);
    }

    pub(crate) fn add_outer_slice(&mut self, x: &[f64], w: f64) {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        if w == 0.0 {
            return;
        }
        for j in 0..d {
            let wx = w * x[j];
            for (i, &xi) in x.iter().enumerate().skip(j) {
                let v = wx * xi;
                self.inner[(i, j)] += v;
                if i != j {
                    self.inner[(j, i)] += v;
                }
            }
        }
    }

    /// Smallest eigenvalue. Used by invariant checks, not the hot path.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.inner.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn factor(&self) -> Result<SpdFactor, LinalgError> {
        SpdFactor::new(self)
    }
}

/// Cholesky factor `A = L L^T` of a positive definite [`SymMatrix`].
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(a: &SymMatrix) -> Result<Self, LinalgError> {
        Cholesky::new(a.inner.clone())
            .map(|chol| Self { chol })
            .ok_or(LinalgError::NotPositiveDefinite)
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    fn check_dim(&self, n: usize) -> Result<(), LinalgError> {
        if n != self.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim(),
                got: n,
            });
        }
        Ok(())
    }

    /// `A^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        self.check_dim(b.len())?;
        Ok(self.chol.solve(b))
    }

    /// `x^T A^{-1} x`, computed as `|L^{-1} x|^2`.
    pub fn quad_form_inv(&self, x: &[f64]) -> Result<f64, LinalgError> {
        self.check_dim(x.len())?;
        let l = self.chol.l_dirty();
        let d = x.len();
        let mut y = [0.0f64; 64];
        let mut heap;
        let y: &mut [f64] = if d <= y.len() {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        // forward substitution on the lower triangle
        let mut acc = 0.0;
        for i in 0..d {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            let yi = s / l[(i, i)];
            y[i] = yi;
            acc += yi * yi;
        }
        Ok(acc)
    }

    /// `|x|_{A^{-1}} = sqrt(x^T A^{-1} x)`.
    pub fn inv_norm(&self, x: &[f64]) -> Result<f64, LinalgError> {
        self.quad_form_inv(x).map(f64::sqrt)
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..self.dim()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Solves `A y = b` for positive definite `A`.
pub fn solve_spd(a: &SymMatrix, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if b.len() != a.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim(),
            got: b.len(),
        });
    }
    a.factor()?.solve(b)
}

/// The dual norm `|x|_{A^{-1}} = sqrt(x^T A^{-1} x)`.
pub fn quad_norm(a: &SymMatrix, x: &DVector<f64>) -> Result<f64, LinalgError> {
    if x.len() != a.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim(),
            got: x.len(),
        });
    }
    a.factor()?.inv_norm(x.as_slice())
}

/// Symmetric inverse square root `A^{-1/2}` via eigendecomposition.
pub fn inv_sqrt(a: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = SymmetricEigen::new(a.inner.clone());
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(LinalgError::NotPositiveDefinite);
    }
    let scaled = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let q = &eig.eigenvectors;
    let mut b = q * DMatrix::from_diagonal(&scaled) * q.transpose();
    // clean rounding asymmetry
    let bt = b.transpose();
    b += bt;
    b *= 0.5;
    Ok(SymMatrix { inner: b })
}

/// Returns `A + w x x^T`.
pub fn rank1_update(a: &SymMatrix, x: &DVector<f64>, w: f64) -> Result<SymMatrix, LinalgError> {
    if x.len() != a.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim(),
            got: x.len(),
        });
    }
    let mut out = a.clone();
    out.add_outer(x, w);
    Ok(out)
}
