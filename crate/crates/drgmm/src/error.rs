use thiserror::Error;

/// Errors produced by moment evaluation, test statistics and solvers.
#[derive(Error, Debug, Clone)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite moment value at observation {obs} (component {component})")]
    NonFiniteMoment { obs: usize, component: usize },

    #[error(
        "singular covariance matrix: smallest eigenvalue {min_eig:.3e} below tolerance {tol:.3e}"
    )]
    SingularCovariance { min_eig: f64, tol: f64 },

    #[error("matrix is not positive definite: smallest eigenvalue {min_eig:.3e}")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("degenerate test: both the moment vector (norm {f_norm:.3e}) and the recentered Jacobian (norm {d_norm:.3e}) vanish")]
    DegenerateTest { f_norm: f64, d_norm: f64 },

    #[error("rank deficient matrix in {0}")]
    RankDeficient(String),

    #[error("solver failed to converge: {0}")]
    NonConvergence(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("moment structure violation: quantity assumed constant over theta has relative spread {spread:.3e} (limit {limit:.3e})")]
    StructureViolation { spread: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
