//! Generic GMM moment evaluation: sample moments, derivatives, recentered
//! covariance estimators and the recentered Jacobian that every statistic
//! consumes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymPd};

/// A GMM moment model: per-observation moment function `f_t(theta)` with
/// its analytic derivative `q_t(theta)`, for an overidentified system
/// (`k_f > m`).
///
/// Implementations must be immutable after construction so they can be
/// shared across worker threads.
pub trait MomentModel: Sync {
    /// Moment dimension `k_f`.
    fn k_f(&self) -> usize;
    /// Parameter dimension `m`.
    fn m(&self) -> usize;
    /// Observation count `T`.
    fn n_obs(&self) -> usize;
    /// Per-observation moment `f_t(theta)`, a `k_f`-vector.
    fn moment(&self, theta: &DVector<f64>, t: usize) -> DVector<f64>;
    /// Per-observation derivative `q_t(theta) = d f_t / d theta'`, `k_f x m`.
    fn moment_derivative(&self, theta: &DVector<f64>, t: usize) -> DMatrix<f64>;

    /// Full evaluation at `theta`. The default assembles the recentered
    /// Eicker-White covariance blocks; models with closed-form covariances
    /// (linear factor, iid linear IV) override this.
    fn evaluate(&self, theta: &DVector<f64>) -> Result<MomentEvaluation> {
        evaluate_generic(self, theta, false)
    }

    /// Reduced-form structure of linear moment models; `None` for
    /// nonlinear models.
    fn linear_parts(&self) -> Option<&crate::models::LinearModelParts> {
        None
    }
}

/// Everything a test statistic needs at a hypothesized `theta`:
/// sample moments, derivative, recentered covariance blocks and the
/// recentered Jacobian.
#[derive(Debug, Clone)]
pub struct MomentEvaluation {
    pub theta: DVector<f64>,
    /// Sample moment `f_T(theta)`.
    pub f_t: DVector<f64>,
    /// Sample derivative `q_T(theta)`, `k_f x m`.
    pub q_t: DMatrix<f64>,
    /// `V_ff`, `k_f x k_f`.
    pub v_ff: DMatrix<f64>,
    /// Blocks `V_{theta_i f}`, each `k_f x k_f`.
    pub v_theta_f: Vec<DMatrix<f64>>,
    /// `V_{theta theta}`, `(m k_f) x (m k_f)`.
    pub v_theta_theta: DMatrix<f64>,
    /// `V_{theta theta . f} = V_tt - V_tf V_ff^{-1} V_tf'`.
    pub v_theta_theta_f: DMatrix<f64>,
    /// Recentered Jacobian `D_hat(theta)`, `k_f x m`.
    pub d_hat: DMatrix<f64>,
    /// Observation count.
    pub n_obs: usize,
    pub(crate) v_ff_pd: SymPd,
}

impl MomentEvaluation {
    pub fn k_f(&self) -> usize {
        self.f_t.len()
    }

    pub fn m(&self) -> usize {
        self.d_hat.ncols()
    }

    /// The unscaled CUE quadratic form `f_T' V_ff^{-1} f_T`.
    pub fn cue_objective(&self) -> f64 {
        self.v_ff_pd.inv_quad(&self.f_t)
    }

    /// `T * f_T' V_ff^{-1} f_T`, the GMM-AR statistic value.
    pub fn cue_objective_scaled(&self) -> f64 {
        self.n_obs as f64 * self.cue_objective()
    }

    pub(crate) fn v_ff_inv_f(&self) -> DVector<f64> {
        self.v_ff_pd.solve_vec(&self.f_t)
    }

    pub(crate) fn v_ff_pd(&self) -> &SymPd {
        &self.v_ff_pd
    }
}

/// Sample moments and their derivative at `theta`:
/// `f_T = (1/T) sum_t f_t`, `q_T = (1/T) sum_t q_t`.
pub fn evaluate_sample_moments<M: MomentModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (k, m, t_len) = (model.k_f(), model.m(), model.n_obs());
    if theta.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} elements, model expects {}",
            theta.len(),
            m
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite theta".into()));
    }
    if t_len < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 observations, got {t_len}"
        )));
    }
    let mut f_sum = DVector::zeros(k);
    let mut q_sum = DMatrix::zeros(k, m);
    for t in 0..t_len {
        let f = model.moment(theta, t);
        if let Some(component) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMoment { obs: t, component });
        }
        let q = model.moment_derivative(theta, t);
        if let Some(pos) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMoment {
                obs: t,
                component: pos,
            });
        }
        f_sum += f;
        q_sum += q;
    }
    let inv_t = 1.0 / t_len as f64;
    Ok((f_sum * inv_t, q_sum * inv_t))
}

/// Recentered (Eicker-White) covariance blocks of the stacked series
/// `(f_t, vec q_t)` at `theta`, plus the Schur complement
/// `V_tt.f = V_tt - V_tf V_ff^{-1} V_tf'`.
#[derive(Debug)]
pub struct CovarianceBlocks {
    pub v_ff: DMatrix<f64>,
    pub v_theta_f: Vec<DMatrix<f64>>,
    pub v_theta_theta: DMatrix<f64>,
    pub v_theta_theta_f: DMatrix<f64>,
    pub(crate) v_ff_pd: SymPd,
}

/// Eicker-White recentered outer-product covariance estimators. With
/// `ridge = false` a singular `V_ff` is an error; `ridge = true` adds a
/// small diagonal bump instead (opt-in, for exploratory use).
pub fn eicker_white_covariance<M: MomentModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    ridge: bool,
) -> Result<CovarianceBlocks> {
    let (k, m, t_len) = (model.k_f(), model.m(), model.n_obs());
    let (f_bar, q_bar) = evaluate_sample_moments(model, theta)?;

    let mut v_ff = DMatrix::zeros(k, k);
    let mut v_tf = DMatrix::zeros(m * k, k);
    let mut v_tt = DMatrix::zeros(m * k, m * k);
    for t in 0..t_len {
        let fd = model.moment(theta, t) - &f_bar;
        let qd = model.moment_derivative(theta, t) - &q_bar;
        // vec(qd): stacked columns.
        let qv = DVector::from_fn(m * k, |i, _| qd[(i % k, i / k)]);
        v_ff += &fd * fd.transpose();
        v_tf += &qv * fd.transpose();
        v_tt += &qv * qv.transpose();
    }
    let inv_t = 1.0 / t_len as f64;
    v_ff *= inv_t;
    v_tf *= inv_t;
    v_tt *= inv_t;

    assemble_blocks(v_ff, v_tf, v_tt, k, m, ridge)
}

pub(crate) fn assemble_blocks(
    v_ff: DMatrix<f64>,
    v_tf: DMatrix<f64>,
    v_tt: DMatrix<f64>,
    k: usize,
    m: usize,
    ridge: bool,
) -> Result<CovarianceBlocks> {
    let v_ff = symmetrize(&v_ff);
    let v_ff_pd = SymPd::new(&v_ff, ridge)?;
    let v_tt_f = symmetrize(&(&v_tt - &v_tf * v_ff_pd.solve_mat(&v_tf.transpose())));
    let v_theta_f = (0..m)
        .map(|i| v_tf.rows(i * k, k).into_owned())
        .collect();
    Ok(CovarianceBlocks {
        v_ff,
        v_theta_f,
        v_theta_theta: symmetrize(&v_tt),
        v_theta_theta_f: v_tt_f,
        v_ff_pd,
    })
}

/// `D_hat(theta) = q_T - [V_t1f V_ff^{-1} f_T ... V_tmf V_ff^{-1} f_T]`.
pub fn recentered_jacobian(
    q_t: &DMatrix<f64>,
    f_t: &DVector<f64>,
    v_theta_f: &[DMatrix<f64>],
    v_ff_pd: &SymPd,
) -> DMatrix<f64> {
    let vf = v_ff_pd.solve_vec(f_t);
    let mut d = q_t.clone();
    for (i, block) in v_theta_f.iter().enumerate() {
        let correction = block * &vf;
        let mut col = d.column_mut(i);
        col -= correction;
    }
    d
}

/// Full generic evaluation: sample moments, Eicker-White covariance and
/// recentered Jacobian.
pub fn evaluate_generic<M: MomentModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    ridge: bool,
) -> Result<MomentEvaluation> {
    let (f_t, q_t) = evaluate_sample_moments(model, theta)?;
    let blocks = eicker_white_covariance(model, theta, ridge)?;
    let d_hat = recentered_jacobian(&q_t, &f_t, &blocks.v_theta_f, &blocks.v_ff_pd);
    Ok(MomentEvaluation {
        theta: theta.clone(),
        f_t,
        q_t,
        v_ff: blocks.v_ff,
        v_theta_f: blocks.v_theta_f,
        v_theta_theta: blocks.v_theta_theta,
        v_theta_theta_f: blocks.v_theta_theta_f,
        d_hat,
        n_obs: model.n_obs(),
        v_ff_pd: blocks.v_ff_pd,
    })
}

/// Checks that `moment_derivative` is the analytic derivative of `moment`
/// by a central finite difference at `theta`. Returns the worst relative
/// error over observations sampled from the data.
pub fn derivative_check<M: MomentModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    step: f64,
) -> Result<f64> {
    let m = model.m();
    let stride = (model.n_obs() / 16).max(1);
    let mut worst = 0.0f64;
    for t in (0..model.n_obs()).step_by(stride) {
        let q = model.moment_derivative(theta, t);
        for i in 0..m {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            let h = step * (1.0 + theta[i].abs());
            up[i] += h;
            dn[i] -= h;
            let fd = (model.moment(&up, t) - model.moment(&dn, t)) / (2.0 * h);
            let scale = q.column(i).amax().max(fd.amax()).max(1e-8);
            let err = (fd - q.column(i)).amax() / scale;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
