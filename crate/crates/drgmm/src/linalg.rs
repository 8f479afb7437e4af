//! Symmetric-matrix helpers shared by the moment and test machinery.
//!
//! All inversions of covariance matrices go through a symmetric
//! eigendecomposition rather than a Cholesky factorization, so a
//! near-singular matrix yields a diagnosable spectrum instead of a
//! factorization failure.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue tolerance below which a covariance matrix is
/// treated as singular: smallest eigenvalue < `SINGULARITY_RTOL * trace/k`.
pub const SINGULARITY_RTOL: f64 = 1e-12;

/// Ridge added (relative to `trace/k`) when the caller opts into
/// regularized inversion of a flagged-singular matrix.
pub const RIDGE_RTOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric positive definite matrix, exposing
/// inverse, inverse square root and square root as explicit matrices.
#[derive(Debug, Clone)]
pub struct SymPd {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl SymPd {
    /// Decomposes `m`, failing with `SingularCovariance` when the smallest
    /// eigenvalue falls below the relative tolerance. With `ridge = true`
    /// a small multiple of the identity is added instead of failing.
    pub fn new(m: &DMatrix<f64>, ridge: bool) -> Result<Self> {
        let k = m.nrows();
        if k == 0 || m.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = symmetrize(m);
        let eig = sym.symmetric_eigen();
        let scale = (eig.eigenvalues.sum() / k as f64).abs().max(f64::MIN_POSITIVE);
        let tol = SINGULARITY_RTOL * scale;
        let min_eig = eig.eigenvalues.min();
        let mut values = eig.eigenvalues;
        if min_eig < tol {
            if !ridge {
                return Err(Error::SingularCovariance { min_eig, tol });
            }
            let bump = RIDGE_RTOL * scale;
            values.apply(|v| *v += bump);
            if values.min() <= 0.0 {
                return Err(Error::SingularCovariance { min_eig, tol });
            }
        }
        Ok(SymPd {
            vectors: eig.eigenvectors,
            values,
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.values.min()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.values.map(f));
        &self.vectors * d * self.vectors.transpose()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.map(|v| 1.0 / v)
    }

    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.map(|v| 1.0 / v.sqrt())
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.map(f64::sqrt)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let proj = self.vectors.transpose() * rhs;
        let scaled = proj.component_div(&self.values);
        &self.vectors * scaled
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.inverse() * rhs
    }

    /// Quadratic form `x' M^{-1} x`.
    pub fn inv_quad(&self, x: &DVector<f64>) -> f64 {
        let proj = self.vectors.transpose() * x;
        proj.iter()
            .zip(self.values.iter())
            .map(|(p, v)| p * p / v)
            .sum()
    }
}

/// `(m + m') / 2`, guarding quadratic-form code against asymmetry built up
/// from floating point accumulation.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves the generalized symmetric eigenproblem `det(tau * b - a) = 0`
/// with `b` positive definite. Returns eigenvalues sorted ascending with
/// eigenvectors (in the original coordinates, unit `b`-norm) as columns.
pub fn generalized_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() || a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "generalized eigenproblem needs square matrices of equal size, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let b_pd = SymPd::new(b, false).map_err(|_| Error::NotPositiveDefinite {
        min_eig: symmetrize(b).symmetric_eigen().eigenvalues.min(),
    })?;
    let b_inv_sqrt = b_pd.inv_sqrt();
    let transformed = symmetrize(&(&b_inv_sqrt * symmetrize(a) * &b_inv_sqrt));
    let eig = transformed.symmetric_eigen();

    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = &b_inv_sqrt * eig.eigenvectors.column(src);
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}

/// Fixes the sign of every column so its first entry of largest magnitude
/// is positive; makes decompositions deterministic across runs.
pub fn canonicalize_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut pivot = 0.0f64;
        for i in 0..m.nrows() {
            if m[(i, j)].abs() > pivot.abs() {
                pivot = m[(i, j)];
            }
        }
        if pivot < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}
