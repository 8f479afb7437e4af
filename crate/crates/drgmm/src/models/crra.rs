//! The CRRA Euler-equation moment model and its log-normal population
//! counterparts.
//!
//! The moment function is
//! `f_t(gamma) = delta0 (C_{t+1}/C_t)^{-gamma} (1 + R_{t+1}) - 1` with the
//! discount factor held fixed, so `gamma` is the single structural
//! parameter. Under the joint log-normal data generating process the
//! population moment and covariance have closed forms, from which the
//! pseudo-true value is computed numerically.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymPd};
use crate::moments::MomentModel;
use crate::stats::golden_min;

/// Exponent bound for `gamma * log-consumption-growth` beyond which the
/// moment function is refused rather than clamped.
const SAFE_EXPONENT: f64 = 600.0;

/// Sample CRRA moment model on observed consumption and returns.
pub struct CrraModel {
    /// Gross consumption growth `C_{t+1}/C_t`, length `T`.
    growth: Vec<f64>,
    /// Log growth, precomputed.
    log_growth: Vec<f64>,
    /// Gross returns `1 + R_{t+1}`, `T x N`.
    gross_returns: DMatrix<f64>,
    delta0: f64,
    /// Largest |log growth|, fixing the safe range for `gamma`.
    max_abs_log_growth: f64,
}

impl CrraModel {
    /// `consumption` has `T + 1` entries; `returns` is `T x N` of net
    /// returns (each > -1).
    pub fn new(consumption: &[f64], returns: &DMatrix<f64>, delta0: f64) -> Result<Self> {
        let t = returns.nrows();
        if consumption.len() != t + 1 {
            return Err(Error::DimensionMismatch(format!(
                "consumption needs T + 1 = {} entries, got {}",
                t + 1,
                consumption.len()
            )));
        }
        if consumption.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidParameter("consumption must be positive".into()));
        }
        if returns.iter().any(|&r| !(r > -1.0) || !r.is_finite()) {
            return Err(Error::InvalidParameter("returns must be finite and > -1".into()));
        }
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "discount factor must lie in (0,1), got {delta0}"
            )));
        }
        let growth: Vec<f64> = (0..t).map(|i| consumption[i + 1] / consumption[i]).collect();
        let log_growth: Vec<f64> = growth.iter().map(|g| g.ln()).collect();
        let max_abs_log_growth = log_growth.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let gross_returns = returns.map(|r| 1.0 + r);
        Ok(CrraModel {
            growth,
            log_growth,
            gross_returns,
            delta0,
            max_abs_log_growth,
        })
    }

    /// Largest |gamma| for which the moment function stays within the
    /// documented overflow-safe range given this data set.
    pub fn safe_gamma_bound(&self) -> f64 {
        if self.max_abs_log_growth == 0.0 {
            f64::INFINITY
        } else {
            SAFE_EXPONENT / self.max_abs_log_growth
        }
    }

    fn check_gamma(&self, gamma: f64) -> Result<()> {
        if !gamma.is_finite() {
            return Err(Error::InvalidParameter("non-finite gamma".into()));
        }
        if gamma.abs() > self.safe_gamma_bound() {
            return Err(Error::InvalidParameter(format!(
                "gamma = {gamma} outside the overflow-safe range |gamma| <= {:.1} for this data",
                self.safe_gamma_bound()
            )));
        }
        Ok(())
    }
}

impl MomentModel for CrraModel {
    fn k_f(&self) -> usize {
        self.gross_returns.ncols()
    }

    fn m(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.growth.len()
    }

    fn moment(&self, theta: &DVector<f64>, t: usize) -> DVector<f64> {
        let gamma = theta[0];
        if self.check_gamma(gamma).is_err() {
            // Surfaces as a NonFiniteMoment error at the evaluation layer.
            return DVector::from_element(self.k_f(), f64::NAN);
        }
        let sdf = self.delta0 * (-gamma * self.log_growth[t]).exp();
        self.gross_returns.row(t).transpose() * sdf - DVector::from_element(self.k_f(), 1.0)
    }

    fn moment_derivative(&self, theta: &DVector<f64>, t: usize) -> DMatrix<f64> {
        let gamma = theta[0];
        if self.check_gamma(gamma).is_err() {
            return DMatrix::from_element(self.k_f(), 1, f64::NAN);
        }
        let lg = self.log_growth[t];
        let sdf = self.delta0 * (-gamma * lg).exp();
        DMatrix::from_fn(self.k_f(), 1, |i, _| -lg * sdf * self.gross_returns[(t, i)])
    }
}

/// Parameters of the log-normal data generating process for
/// `(delta c_{t+1}, r_{t+1})` with `r = ln(1 + R)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrraDgpParams {
    pub delta0: f64,
    /// Anchor risk aversion; the correct-specification restriction sets
    /// the mean of `r` so that `mu_f(gamma0) = 0` when `c = 0`.
    pub gamma0: f64,
    /// Variance of log consumption growth.
    pub v_cc: f64,
    /// Base covariances between `r_i` and `delta c` (before the
    /// identification scaling `c_tilde`).
    pub v_rc_base: Vec<f64>,
    /// Covariance matrix of the log gross returns.
    pub v_rr: Vec<Vec<f64>>,
    /// Misspecification shift subtracted from every mean log return.
    pub c: f64,
    /// Identification scale multiplying the base correlations.
    pub c_tilde: f64,
}

impl CrraDgpParams {
    /// The calibration shipped with the crate: five assets with annual-data
    /// magnitudes, tuned so the pseudo-true value moves from 15 at `c = 0`
    /// to about 24 at `c = 0.1` under `c_tilde = 1`. Anchor values that
    /// depend on the calibration are calibration-sensitive; overrides are
    /// accepted through the serializable fields.
    pub fn shipped(c: f64, c_tilde: f64) -> Self {
        let vrr_diag: [f64; 5] = [0.02, 0.0325, 0.045, 0.0575, 0.07];
        let rho: [f64; 5] = [0.10, 0.125, 0.15, 0.175, 0.20];
        let corr = 0.5;
        let v_cc = 5.7e-4;
        let n = 5;
        let mut v_rr = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                v_rr[i][j] = if i == j {
                    vrr_diag[i]
                } else {
                    corr * (vrr_diag[i] * vrr_diag[j]).sqrt()
                };
            }
        }
        let v_rc_base: Vec<f64> = (0..n)
            .map(|i| rho[i] * (v_cc * vrr_diag[i]).sqrt())
            .collect();
        CrraDgpParams {
            delta0: 0.95,
            gamma0: 15.0,
            v_cc,
            v_rc_base,
            v_rr,
            c,
            c_tilde,
        }
    }

    pub fn n_assets(&self) -> usize {
        self.v_rc_base.len()
    }

    /// Effective `V_rc` after the identification scaling.
    pub fn v_rc(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_assets(),
            self.v_rc_base.iter().map(|v| v * self.c_tilde),
        )
    }

    pub fn v_rr_matrix(&self) -> DMatrix<f64> {
        let n = self.n_assets();
        DMatrix::from_fn(n, n, |i, j| self.v_rr[i][j])
    }

    /// Mean log returns: the correct-specification value shifted by `-c`.
    pub fn mu2(&self) -> DVector<f64> {
        let n = self.n_assets();
        let v_rc = self.v_rc();
        DVector::from_fn(n, |i, _| {
            -self.delta0.ln()
                - 0.5
                    * (self.v_rr[i][i] + self.gamma0 * self.gamma0 * self.v_cc
                        - 2.0 * self.gamma0 * v_rc[i])
                - self.c
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_assets();
        if n == 0 || self.v_rr.len() != n || self.v_rr.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch("V_rr must be N x N".into()));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return Err(Error::InvalidParameter("delta0 must lie in (0,1)".into()));
        }
        if !(self.v_cc > 0.0) {
            return Err(Error::InvalidParameter("V_cc must be positive".into()));
        }
        if self.c < 0.0 {
            return Err(Error::InvalidParameter("misspecification shift c must be >= 0".into()));
        }
        if !(self.c_tilde > 0.0) {
            return Err(Error::InvalidParameter("identification scale c_tilde must be > 0".into()));
        }
        let v_rc = self.v_rc();
        for i in 0..n {
            if v_rc[i].abs() > (self.v_cc * self.v_rr[i][i]).sqrt() {
                return Err(Error::InvalidParameter(format!(
                    "correlation bound violated for asset {i}: |c_tilde * V_rc| > sqrt(V_cc V_rr)"
                )));
            }
        }
        // Joint covariance of (delta c, r) must stay positive definite.
        SymPd::new(&self.joint_covariance(), false)
            .map_err(|_| Error::NotPositiveDefinite {
                min_eig: symmetrize(&self.joint_covariance())
                    .symmetric_eigen()
                    .eigenvalues
                    .min(),
            })
            .map(|_| ())
    }

    /// `(N+1) x (N+1)` covariance of `(delta c, r)`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let n = self.n_assets();
        let v_rc = self.v_rc();
        let mut v = DMatrix::zeros(n + 1, n + 1);
        v[(0, 0)] = self.v_cc;
        for i in 0..n {
            v[(0, i + 1)] = v_rc[i];
            v[(i + 1, 0)] = v_rc[i];
            for j in 0..n {
                v[(i + 1, j + 1)] = self.v_rr[i][j];
            }
        }
        v
    }
}

/// Population moment `mu_f(gamma)` and covariance `V_ff(gamma)` under the
/// log-normal data generating process:
/// `mu_f,i = exp(ln d0 + mu2_i + (V_rr,ii + g^2 V_cc - 2 g V_rc,i)/2) - 1`
/// and, with `m_i = mu_f,i + 1`,
/// `V_ff,ij = m_i m_j (exp(g^2 V_cc - g(V_rc,i + V_rc,j) + V_rr,ij) - 1)`.
pub fn crra_population(params: &CrraDgpParams, gamma: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = params.n_assets();
    let mu2 = params.mu2();
    let v_rc = params.v_rc();
    let means = DVector::from_fn(n, |i, _| {
        (params.delta0.ln()
            + mu2[i]
            + 0.5 * (params.v_rr[i][i] + gamma * gamma * params.v_cc - 2.0 * gamma * v_rc[i]))
            .exp()
    });
    let mu_f = means.map(|m| m - 1.0);
    let v_ff = DMatrix::from_fn(n, n, |i, j| {
        let q = gamma * gamma * params.v_cc - gamma * (v_rc[i] + v_rc[j]) + params.v_rr[i][j];
        means[i] * means[j] * (q.exp() - 1.0)
    });
    (mu_f, v_ff)
}

/// Pseudo-true value of `gamma` and the minimal population objective.
#[derive(Debug, Clone, Copy)]
pub struct CrraPseudoTrue {
    pub gamma_star: f64,
    pub min_objective: f64,
    /// Set when the minimizer sits at the search bracket edge, in which
    /// case the population minimizer may lie at +-infinity.
    pub at_bracket_edge: bool,
}

/// Minimizes `mu_f(gamma)' V_ff(gamma)^{-1} mu_f(gamma)` over the bracket
/// `[-50, 100]`, grid search refined by golden section to 1e-6.
pub fn crra_pseudo_true(params: &CrraDgpParams) -> Result<CrraPseudoTrue> {
    params.validate()?;
    let objective = |gamma: f64| -> f64 {
        let (mu, v) = crra_population(params, gamma);
        match SymPd::new(&v, false) {
            Ok(pd) => pd.inv_quad(&mu),
            Err(_) => f64::INFINITY,
        }
    };
    let (lo, hi) = (-50.0, 100.0);
    let n_grid = 3001;
    let step = (hi - lo) / (n_grid - 1) as f64;
    let mut best = (f64::INFINITY, lo);
    for i in 0..n_grid {
        let g = lo + i as f64 * step;
        let v = objective(g);
        if v < best.0 {
            best = (v, g);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::NonConvergence(
            "population objective not finite anywhere on the bracket".into(),
        ));
    }
    let (a, b) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
    let (gamma_star, min_objective) = golden_min(a, b, 1e-6, &objective);
    let at_bracket_edge = gamma_star - lo < 2.0 * step || hi - gamma_star < 2.0 * step;
    Ok(CrraPseudoTrue {
        gamma_star,
        min_objective,
        at_bracket_edge,
    })
}

/// Draws an exact log-normal sample: a consumption path of length `T + 1`
/// (starting at 1) and a `T x N` matrix of net returns. Fixed `(params,
/// t_obs, seed)` reproduce the same draws bit for bit.
pub fn crra_dgp_sample(
    params: &CrraDgpParams,
    t_obs: usize,
    seed: u64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    crra_dgp_sample_stream(params, t_obs, seed, 0)
}

/// Like [`crra_dgp_sample`] but on a counter-based replication stream, so
/// parallel generation stays deterministic.
pub fn crra_dgp_sample_stream(
    params: &CrraDgpParams,
    t_obs: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    params.validate()?;
    let n = params.n_assets();
    let joint = params.joint_covariance();
    let root = SymPd::new(&joint, false)?.sqrt();
    let mu2 = params.mu2();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut consumption = Vec::with_capacity(t_obs + 1);
    consumption.push(1.0);
    let mut returns = DMatrix::zeros(t_obs, n);
    for t in 0..t_obs {
        let z = DVector::from_fn(n + 1, |_, _| StandardNormal.sample(&mut rng));
        let draw = &root * z;
        let dc = draw[0];
        consumption.push(consumption[t] * dc.exp());
        for i in 0..n {
            returns[(t, i)] = (mu2[i] + draw[i + 1]).exp() - 1.0;
        }
    }
    Ok((consumption, returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{derivative_check, evaluate_sample_moments};
    use approx::assert_relative_eq;

    #[test]
    fn gamma_zero_constant_returns_gives_plugin_value() {
        // gamma = 0, constant gross growth 1, R = 0 => f_T = (0.95 - 1) iota.
        let consumption = vec![1.0; 11];
        let returns = DMatrix::zeros(10, 3);
        let model = CrraModel::new(&consumption, &returns, 0.95).unwrap();
        let (f, _) = evaluate_sample_moments(&model, &DVector::zeros(1)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(f[i], -0.05, epsilon = 1e-14);
        }
    }

    #[test]
    fn gamma_zero_constant_returns_general() {
        let consumption: Vec<f64> = (0..21).map(|i| 1.0 + 0.01 * i as f64).collect();
        let r = 0.07;
        let returns = DMatrix::from_element(20, 2, r);
        let model = CrraModel::new(&consumption, &returns, 0.95).unwrap();
        let (f, _) = evaluate_sample_moments(&model, &DVector::zeros(1)).unwrap();
        for i in 0..2 {
            assert_relative_eq!(f[i], 0.95 * (1.0 + r) - 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let params = CrraDgpParams::shipped(0.05, 1.0);
        let (cons, rets) = crra_dgp_sample(&params, 60, 42).unwrap();
        let model = CrraModel::new(&cons, &rets, params.delta0).unwrap();
        for gamma in [-3.0, 0.0, 15.0, 40.0] {
            let err = derivative_check(&model, &DVector::from_vec(vec![gamma]), 1e-6).unwrap();
            assert!(err < 1e-6, "worst relative error {err} at gamma {gamma}");
        }
    }

    #[test]
    fn unsafe_gamma_errors_instead_of_clamping() {
        let params = CrraDgpParams::shipped(0.0, 1.0);
        let (cons, rets) = crra_dgp_sample(&params, 40, 3).unwrap();
        let model = CrraModel::new(&cons, &rets, params.delta0).unwrap();
        let bound = model.safe_gamma_bound();
        let res = evaluate_sample_moments(&model, &DVector::from_vec(vec![bound * 2.0]));
        assert!(matches!(res, Err(Error::NonFiniteMoment { .. })));
    }

    #[test]
    fn population_moment_zero_at_anchor_under_correct_specification() {
        let params = CrraDgpParams::shipped(0.0, 1.0);
        let (mu, _) = crra_population(&params, params.gamma0);
        assert!(mu.amax() < 1e-15, "mu_f(gamma0) = {mu:?}");
    }

    #[test]
    fn pseudo_true_anchors() {
        let clean = CrraDgpParams::shipped(0.0, 1.0);
        let pt = crra_pseudo_true(&clean).unwrap();
        assert!((pt.gamma_star - 15.0).abs() < 1e-5);
        assert!(pt.min_objective < 1e-12);
        assert!(!pt.at_bracket_edge);

        let shifted = CrraDgpParams::shipped(0.1, 1.0);
        let pt = crra_pseudo_true(&shifted).unwrap();
        assert!(
            (pt.gamma_star - 24.0).abs() < 0.5,
            "gamma*(c = 0.1) = {}",
            pt.gamma_star
        );
        assert!(pt.min_objective > 0.0);
    }

    #[test]
    fn pseudo_true_matches_dense_grid_oracle() {
        let params = CrraDgpParams::shipped(0.07, 1.0);
        let pt = crra_pseudo_true(&params).unwrap();
        // Brute force over 10^5 points.
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..100_000 {
            let g = -50.0 + 150.0 * i as f64 / 99_999.0;
            let (mu, v) = crra_population(&params, g);
            let val = SymPd::new(&v, false).unwrap().inv_quad(&mu);
            if val < best.0 {
                best = (val, g);
            }
        }
        assert!((pt.gamma_star - best.1).abs() < 1e-3);
        assert!(pt.min_objective <= best.0 + 1e-12);
    }

    #[test]
    fn population_moment_derivative_matches_finite_difference() {
        // The exponent is linear in gamma^2 and gamma, so
        // d mu_f,i / d gamma = (mu_f,i + 1)(gamma V_cc - V_rc,i).
        let params = CrraDgpParams::shipped(0.08, 1.0);
        let v_rc = params.v_rc();
        for gamma in [-5.0, 10.0, 25.0] {
            let (mu, _) = crra_population(&params, gamma);
            let h = 1e-5;
            let (up, _) = crra_population(&params, gamma + h);
            let (dn, _) = crra_population(&params, gamma - h);
            for i in 0..params.n_assets() {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                let analytic = (mu[i] + 1.0) * (gamma * params.v_cc - v_rc[i]);
                assert_relative_eq!(fd, analytic, max_relative = 1e-6, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bracketed_cue_concentrates_near_anchor_under_correct_specification() {
        // On the same bracket as the population search the sample
        // objective minimizer sits near the anchor. (Over the whole
        // extended line the CUE can escape to extreme gamma where a
        // handful of observations dominate the weighting, mirroring the
        // huge CUE point estimates seen under weak identification.)
        let params = CrraDgpParams::shipped(0.0, 1.0);
        let (cons, rets) = crra_dgp_sample(&params, 5000, 21).unwrap();
        let model = CrraModel::new(&cons, &rets, params.delta0).unwrap();
        let objective = |gamma: f64| -> f64 {
            model
                .evaluate(&DVector::from_vec(vec![gamma]))
                .map(|e| e.cue_objective())
                .unwrap_or(f64::INFINITY)
        };
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..1501 {
            let g = -50.0 + 150.0 * i as f64 / 1500.0;
            let v = objective(g);
            if v < best.0 {
                best = (v, g);
            }
        }
        let (gamma_hat, _) = crate::stats::golden_min(best.1 - 0.1, best.1 + 0.1, 1e-8, &objective);
        assert!(
            (gamma_hat - 15.0).abs() < 5.0,
            "bracketed CUE {gamma_hat} far from the anchor 15"
        );
    }

    #[test]
    fn dgp_sample_deterministic_in_seed() {
        let params = CrraDgpParams::shipped(0.1, 1.0);
        let (c1, r1) = crra_dgp_sample(&params, 50, 9).unwrap();
        let (c2, r2) = crra_dgp_sample(&params, 50, 9).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(r1, r2);
        let (c3, _) = crra_dgp_sample(&params, 50, 10).unwrap();
        assert_ne!(c1, c3);
    }

    #[test]
    fn correlation_bound_enforced() {
        let mut params = CrraDgpParams::shipped(0.0, 1.0);
        params.c_tilde = 50.0;
        assert!(crra_dgp_sample(&params, 10, 1).is_err());
    }

    #[test]
    fn sample_moments_of_dgp_match_population_inputs() {
        // Sample mean/covariance of (delta c, r) against (mu, V) at T = 10^5
        // within 5 standard errors.
        let params = CrraDgpParams::shipped(0.05, 1.0);
        let t = 100_000;
        let (cons, rets) = crra_dgp_sample(&params, t, 123).unwrap();
        let n = params.n_assets();
        let mu2 = params.mu2();
        let joint = params.joint_covariance();

        let mut draws = DMatrix::zeros(t, n + 1);
        for i in 0..t {
            draws[(i, 0)] = (cons[i + 1] / cons[i]).ln();
            for j in 0..n {
                draws[(i, j + 1)] = (1.0 + rets[(i, j)]).ln();
            }
        }
        let mean = draws.row_mean();
        assert!((mean[0]).abs() < 5.0 * (params.v_cc / t as f64).sqrt());
        for j in 0..n {
            let se = (joint[(j + 1, j + 1)] / t as f64).sqrt();
            assert!(
                (mean[j + 1] - mu2[j]).abs() < 5.0 * se,
                "mean of r_{j} off by more than 5 s.e."
            );
        }
        let mut centered = draws.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = centered.transpose() * &centered / t as f64;
        for i in 0..=n {
            for j in 0..=n {
                let se = ((joint[(i, i)] * joint[(j, j)] + joint[(i, j)].powi(2)) / t as f64)
                    .sqrt();
                assert!(
                    (cov[(i, j)] - joint[(i, j)]).abs() < 5.0 * se,
                    "cov ({i},{j}) off by more than 5 s.e."
                );
            }
        }
    }
}
