//! Double robust inference for continuous-updating GMM.
//!
//! Implements the DRLM test and its companions (KLM, GMM-AR, J,
//! conditional LR, rank/identification-strength statistics), CUE
//! estimation, confidence-set inversion by test inversion, power
//! enhancement, and a seeded Monte Carlo harness for size and power
//! experiments, for moment models that may be both misspecified and
//! weakly identified.

pub mod confsets;
pub mod error;
pub mod limitdist;
pub mod linalg;
pub mod models;
pub mod moments;
pub mod montecarlo;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use moments::{MomentEvaluation, MomentModel};
pub use stats::{CriticalValuePolicy, TestResult};
