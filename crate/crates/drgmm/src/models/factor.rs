//! The linear asset pricing model with iid errors.
//!
//! Removing the zero-beta return by taking returns in deviation of a
//! reference asset leads to the moment function
//! `mu_f(lambda) = mu_R - beta lambda`, with closed-form covariances
//! `V_ff(lambda) = (1 + lambda' Q^{-1} lambda) Omega` and
//! `V_tt.f(lambda) = (Q + lambda lambda')^{-1} (x) Omega`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymPd};
use crate::models::LinearModelParts;
use crate::moments::{MomentEvaluation, MomentModel};

/// Raw inputs for the factor model: asset returns and factors.
#[derive(Debug, Clone)]
pub struct FactorData {
    /// `T x (N+1)` raw returns, or `T x N` when `excess` is set.
    pub returns: DMatrix<f64>,
    /// `T x m` factors.
    pub factors: DMatrix<f64>,
    /// Returns are already in deviation form; no asset is subtracted.
    pub excess: bool,
    /// Column (0-based) subtracted from the others when `excess` is false.
    /// Defaults to the last column.
    pub subtract_index: Option<usize>,
}

impl FactorData {
    pub fn new(returns: DMatrix<f64>, factors: DMatrix<f64>) -> Self {
        FactorData {
            returns,
            factors,
            excess: false,
            subtract_index: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let t = self.returns.nrows();
        if self.factors.nrows() != t {
            return Err(Error::DimensionMismatch(format!(
                "returns have {} rows, factors {}",
                t,
                self.factors.nrows()
            )));
        }
        let n_assets = self.returns.ncols();
        let m = self.factors.ncols();
        let k_f = if self.excess { n_assets } else { n_assets - 1 };
        if n_assets < 2 || m == 0 || k_f <= m {
            return Err(Error::DimensionMismatch(format!(
                "need k_f > m >= 1, got k_f = {k_f}, m = {m}"
            )));
        }
        if t <= k_f + m {
            return Err(Error::DimensionMismatch(format!(
                "need T > N + m, got T = {t}, N = {k_f}, m = {m}"
            )));
        }
        if self.returns.iter().chain(self.factors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite entries in factor data".into()));
        }
        if let Some(idx) = self.subtract_index {
            if idx >= n_assets {
                return Err(Error::InvalidParameter(format!(
                    "subtract index {idx} out of range for {n_assets} assets"
                )));
            }
        }
        Ok(())
    }
}

/// Linear asset pricing moment model with the iid closed-form covariance
/// structure.
pub struct FactorModel {
    /// Returns in deviation of the reference asset, `T x N`.
    r: DMatrix<f64>,
    /// Demeaned factors, `T x m`.
    f_centered: DMatrix<f64>,
    /// OLS residuals of demeaned returns on demeaned factors, `T x N`.
    resid: DMatrix<f64>,
    r_bar: DVector<f64>,
    beta_hat: DMatrix<f64>,
    /// Residual covariance of the OLS of demeaned returns on demeaned
    /// factors, `N x N`.
    omega: DMatrix<f64>,
    /// `Q = (1/T) sum F_bar_t F_bar_t'`, `m x m`.
    q_ff: DMatrix<f64>,
    q_ff_pd: SymPd,
    parts: LinearModelParts,
}

impl FactorModel {
    pub fn new(data: &FactorData) -> Result<Self> {
        data.validate()?;
        let t = data.returns.nrows();
        let n_assets = data.returns.ncols();
        let m = data.factors.ncols();

        let r = if data.excess {
            data.returns.clone()
        } else {
            let sub = data.subtract_index.unwrap_or(n_assets - 1);
            let keep: Vec<usize> = (0..n_assets).filter(|&j| j != sub).collect();
            DMatrix::from_fn(t, n_assets - 1, |i, j| {
                data.returns[(i, keep[j])] - data.returns[(i, sub)]
            })
        };
        let n = r.ncols();

        // Demean factors in-sample so F_bar = 0 in what follows.
        let f_mean = data.factors.row_mean();
        let mut f_centered = data.factors.clone();
        for mut row in f_centered.row_iter_mut() {
            row -= &f_mean;
        }

        let r_bar = r.row_mean().transpose();
        let q_ff = symmetrize(&(f_centered.transpose() * &f_centered / t as f64));
        let q_ff_pd =
            SymPd::new(&q_ff, false).map_err(|_| Error::RankDeficient("factor matrix".into()))?;

        // OLS of demeaned returns on demeaned factors.
        let mut r_centered = r.clone();
        for (i, mut row) in r_centered.row_iter_mut().enumerate() {
            let _ = i;
            row -= r_bar.transpose();
        }
        let cross = r_centered.transpose() * &f_centered / t as f64; // N x m
        let beta_hat = &cross * q_ff_pd.inverse();

        // Residual covariance.
        let resid = &r_centered - &f_centered * beta_hat.transpose();
        let omega = symmetrize(&(resid.transpose() * &resid / t as f64));
        let omega_pd = SymPd::new(&omega, false)
            .map_err(|_| Error::RankDeficient("residual covariance".into()))?;

        let mut stacked = DMatrix::zeros(n, m + 1);
        stacked.set_column(0, &r_bar);
        for j in 0..m {
            stacked.set_column(j + 1, &beta_hat.column(j));
        }
        let mut b = DMatrix::zeros(m + 1, m + 1);
        b[(0, 0)] = 1.0;
        b.view_mut((1, 1), (m, m)).copy_from(&q_ff_pd.inverse());

        let parts = LinearModelParts {
            stacked,
            w_inv: omega_pd.inverse(),
            b,
            coef: beta_hat.clone(),
            coef_cov_l: q_ff_pd.inverse(),
            coef_cov_r: omega.clone(),
        };

        Ok(FactorModel {
            r,
            f_centered,
            resid,
            r_bar,
            beta_hat,
            omega,
            q_ff,
            q_ff_pd,
            parts,
        })
    }

    pub fn r_bar(&self) -> &DVector<f64> {
        &self.r_bar
    }

    pub fn beta_hat(&self) -> &DMatrix<f64> {
        &self.beta_hat
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn q_ff(&self) -> &DMatrix<f64> {
        &self.q_ff
    }

    /// `D_hat(lambda)` via the iid closed form
    /// `-(1/T) sum R_t (F_bar_t + lambda)' [(1/T) sum (F_bar_t + lambda)(F_bar_t + lambda)']^{-1}`,
    /// algebraically equal to the recentered-Jacobian definition.
    pub fn d_hat_closed_form(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let denom = &self.q_ff + lambda * lambda.transpose();
        let denom_inv = SymPd::new(&denom, false).expect("Q + ll' is pd").inverse();
        let numer = &self.beta_hat * &self.q_ff + &self.r_bar * lambda.transpose();
        -(numer * denom_inv)
    }
}

impl MomentModel for FactorModel {
    fn k_f(&self) -> usize {
        self.r.ncols()
    }

    fn m(&self) -> usize {
        self.f_centered.ncols()
    }

    fn n_obs(&self) -> usize {
        self.r.nrows()
    }

    /// Estimating-function representation whose mean is the sample moment
    /// and whose recentered variation is the influence function of
    /// `R_bar - beta_hat lambda`:
    /// `f_t(lambda) = (R_bar - beta_hat lambda) + u_t (1 - F_bar_t' Q^{-1} lambda)`
    /// with `u_t` the OLS residual.
    fn moment(&self, lambda: &DVector<f64>, t: usize) -> DVector<f64> {
        let w = 1.0 - self.f_centered.row(t).transpose().dot(&self.q_ff_pd.solve_vec(lambda));
        (&self.r_bar - &self.beta_hat * lambda) + self.resid.row(t).transpose() * w
    }

    fn moment_derivative(&self, _lambda: &DVector<f64>, t: usize) -> DMatrix<f64> {
        let ut = self.resid.row(t).transpose();
        let w = self.q_ff_pd.solve_vec(&self.f_centered.row(t).transpose());
        -self.beta_hat.clone() - ut * w.transpose()
    }

    fn linear_parts(&self) -> Option<&LinearModelParts> {
        Some(&self.parts)
    }

    /// Closed-form iid evaluation: `V_ff = (1 + l'Q^{-1}l) Omega`,
    /// `V_{theta_i f} = (Q^{-1} l)_i Omega`, `V_tt = Q^{-1} (x) Omega`,
    /// `V_tt.f = (Q + l l')^{-1} (x) Omega`.
    fn evaluate(&self, lambda: &DVector<f64>) -> Result<MomentEvaluation> {
        let m = self.m();
        let n = self.k_f();
        if lambda.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "lambda has {} elements, model expects {m}",
                lambda.len()
            )));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite lambda".into()));
        }
        let f_t = &self.r_bar - &self.beta_hat * lambda;
        let q_t = -self.beta_hat.clone();

        let q_inv_l = self.q_ff_pd.solve_vec(lambda);
        let scale = 1.0 + lambda.dot(&q_inv_l);
        let v_ff = &self.omega * scale;
        let v_ff_pd = SymPd::new(&v_ff, false)?;

        let v_theta_f: Vec<DMatrix<f64>> =
            (0..m).map(|i| &self.omega * q_inv_l[i]).collect();

        let kron = |left: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(m * n, m * n);
            for i in 0..m {
                for j in 0..m {
                    out.view_mut((i * n, j * n), (n, n))
                        .copy_from(&(&self.omega * left[(i, j)]));
                }
            }
            out
        };
        let v_theta_theta = kron(&self.q_ff_pd.inverse());
        let shifted = &self.q_ff + lambda * lambda.transpose();
        let shifted_inv = SymPd::new(&shifted, false)?.inverse();
        let v_theta_theta_f = kron(&shifted_inv);

        let mut d_hat = q_t.clone();
        let vf = v_ff_pd.solve_vec(&f_t);
        for i in 0..m {
            let corr = &v_theta_f[i] * &vf;
            let mut col = d_hat.column_mut(i);
            col -= corr;
        }

        Ok(MomentEvaluation {
            theta: lambda.clone(),
            f_t,
            q_t,
            v_ff,
            v_theta_f,
            v_theta_theta,
            v_theta_theta_f,
            d_hat,
            n_obs: self.n_obs(),
            v_ff_pd,
        })
    }
}
