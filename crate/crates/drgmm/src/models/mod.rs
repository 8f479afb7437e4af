//! Concrete moment models: linear asset pricing (iid), linear IV and the
//! CRRA Euler equation with its log-normal population moments.

mod crra;
mod factor;
mod iv;

pub use crra::{
    crra_dgp_sample, crra_dgp_sample_stream, crra_population, crra_pseudo_true, CrraDgpParams,
    CrraModel, CrraPseudoTrue,
};
pub use factor::{FactorData, FactorModel};
pub use iv::{IvData, IvModel};

use nalgebra::DMatrix;

/// Reduced-form ingredients of a linear moment model, shared between the
/// characteristic-polynomial machinery and the rank statistic.
///
/// The CUE sample objective of a linear model is the generalized Rayleigh
/// quotient
/// `Q_s(theta) = x' (stacked' w_inv stacked) x / (x' b x)` with
/// `x = (1, -theta')'`, and the covariance of the vectorized reduced-form
/// coefficient matrix has Kronecker form `coef_cov_l (x) coef_cov_r`.
#[derive(Debug, Clone)]
pub struct LinearModelParts {
    /// `(mu_hat : coef)`, `k_f x (m+1)`.
    pub stacked: DMatrix<f64>,
    /// Inner weight `w_inv` of the numerator quadratic form, `k_f x k_f`.
    pub w_inv: DMatrix<f64>,
    /// Denominator weighting `b`, `(m+1) x (m+1)`, positive definite.
    pub b: DMatrix<f64>,
    /// Reduced-form coefficient matrix (betas / Sigma_ZX), `k_f x m`.
    pub coef: DMatrix<f64>,
    /// Left Kronecker factor of `Var(sqrt(T) vec coef)`, `m x m`.
    pub coef_cov_l: DMatrix<f64>,
    /// Right Kronecker factor, `k_f x k_f`.
    pub coef_cov_r: DMatrix<f64>,
}

impl LinearModelParts {
    /// Numerator matrix `stacked' w_inv stacked` of the characteristic
    /// polynomial, `(m+1) x (m+1)`.
    pub fn charpoly_numerator(&self) -> DMatrix<f64> {
        self.stacked.transpose() * &self.w_inv * &self.stacked
    }
}
