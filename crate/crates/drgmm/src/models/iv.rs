//! The linear IV regression model `y = X theta + eps`, `X = Z Pi + V`,
//! with included exogenous regressors partialled out by least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymPd};
use crate::models::LinearModelParts;
use crate::moments::{MomentEvaluation, MomentModel};

/// Raw inputs for the linear IV model.
#[derive(Debug, Clone)]
pub struct IvData {
    pub y: DVector<f64>,
    /// Endogenous regressors, `T x m`.
    pub x: DMatrix<f64>,
    /// Instruments, `T x k`.
    pub z: DMatrix<f64>,
    /// Included exogenous regressors, `T x p`; a constant column is always
    /// added before partialling.
    pub w: Option<DMatrix<f64>>,
    /// Use the iid Kronecker covariance structure (default). With `false`
    /// the generic Eicker-White estimator is used.
    pub iid: bool,
}

impl IvData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Self {
        IvData {
            y,
            x,
            z,
            w: None,
            iid: true,
        }
    }
}

/// Linear IV moment model on partialled data:
/// `f_t(theta) = Z_t (y_t - X_t' theta)`.
pub struct IvModel {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    iid: bool,
    /// Reduced-form residual covariance of `(y, X)` after projecting on
    /// `Z` (and `W`), degrees-of-freedom corrected; `(m+1) x (m+1)`.
    omega: DMatrix<f64>,
    q_zz: DMatrix<f64>,
    sigma_zy: DVector<f64>,
    sigma_zx: DMatrix<f64>,
    first_stage_f: f64,
    parts: LinearModelParts,
}

impl IvModel {
    pub fn new(data: &IvData) -> Result<Self> {
        let t = data.y.len();
        let m = data.x.ncols();
        let k = data.z.ncols();
        if data.x.nrows() != t || data.z.nrows() != t {
            return Err(Error::DimensionMismatch(
                "y, X and Z must have the same number of rows".into(),
            ));
        }
        if k <= m {
            return Err(Error::DimensionMismatch(format!(
                "need more instruments than endogenous regressors, got k = {k}, m = {m}"
            )));
        }

        // Partialling basis: constant plus any included exogenous columns.
        let p_w = 1 + data.w.as_ref().map_or(0, |w| w.ncols());
        let mut basis = DMatrix::from_element(t, p_w, 1.0);
        if let Some(w) = &data.w {
            if w.nrows() != t {
                return Err(Error::DimensionMismatch(
                    "W must have the same number of rows as y".into(),
                ));
            }
            basis.view_mut((0, 1), (t, w.ncols())).copy_from(w);
        }
        if t <= k + p_w + m {
            return Err(Error::DimensionMismatch(format!(
                "too few observations: T = {t}, k + p + m = {}",
                k + p_w + m
            )));
        }

        let gram = basis.transpose() * &basis;
        let gram_pd = SymPd::new(&gram, false)
            .map_err(|_| Error::RankDeficient("included exogenous regressors".into()))?;
        let partial = |target: &DMatrix<f64>| -> DMatrix<f64> {
            target - &basis * gram_pd.solve_mat(&(basis.transpose() * target))
        };

        let y_mat = DMatrix::from_column_slice(t, 1, data.y.as_slice());
        let y = DVector::from_column_slice(partial(&y_mat).as_slice());
        let x = partial(&data.x);
        let z = partial(&data.z);

        let q_zz = symmetrize(&(z.transpose() * &z / t as f64));
        let q_zz_pd = SymPd::new(&q_zz, false)
            .map_err(|_| Error::RankDeficient("instruments after partialling".into()))?;
        let sigma_zy = z.transpose() * &y / t as f64;
        let sigma_zx = z.transpose() * &x / t as f64;

        // Reduced-form residuals of (y, X) on Z; dof-corrected covariance so
        // the m = 1 rank statistic equals k times the first-stage F.
        let mut yx = DMatrix::zeros(t, m + 1);
        yx.set_column(0, &y);
        yx.view_mut((0, 1), (t, m)).copy_from(&x);
        let pi_all = q_zz_pd.solve_mat(&(z.transpose() * &yx / t as f64));
        let resid = &yx - &z * &pi_all;
        let dof = (t - k - p_w) as f64;
        let omega = symmetrize(&(resid.transpose() * &resid / dof));

        let pi_hat = pi_all.columns(1, m).into_owned();
        let omega_vv = omega.view((1, 1), (m, m)).into_owned();
        let first_stage_f = if m == 1 {
            let explained = (pi_hat.transpose() * z.transpose() * &z * &pi_hat)[(0, 0)];
            explained / (k as f64 * omega_vv[(0, 0)])
        } else {
            f64::NAN
        };

        let mut stacked = DMatrix::zeros(k, m + 1);
        stacked.set_column(0, &sigma_zy);
        stacked.view_mut((0, 1), (k, m)).copy_from(&sigma_zx);
        let parts = LinearModelParts {
            stacked,
            w_inv: q_zz_pd.inverse(),
            b: omega.clone(),
            coef: sigma_zx.clone(),
            coef_cov_l: omega_vv,
            coef_cov_r: q_zz.clone(),
        };

        Ok(IvModel {
            y,
            x,
            z,
            iid: data.iid,
            omega,
            q_zz,
            sigma_zy,
            sigma_zx,
            first_stage_f,
            parts,
        })
    }

    /// First-stage F statistic (single endogenous regressor only).
    pub fn first_stage_f(&self) -> f64 {
        self.first_stage_f
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn sigma_zx(&self) -> &DMatrix<f64> {
        &self.sigma_zx
    }

    pub fn sigma_zy(&self) -> &DVector<f64> {
        &self.sigma_zy
    }

    /// Two stage least squares estimate on the partialled data.
    pub fn tsls(&self) -> Result<DVector<f64>> {
        let q_pd = SymPd::new(&self.q_zz, false)?;
        let a = self.sigma_zx.transpose() * q_pd.solve_mat(&self.sigma_zx);
        let b = self.sigma_zx.transpose() * q_pd.solve_vec(&self.sigma_zy);
        let a_pd = SymPd::new(&a, false).map_err(|_| Error::RankDeficient("Z'X".into()))?;
        Ok(a_pd.solve_vec(&b))
    }
}

impl MomentModel for IvModel {
    fn k_f(&self) -> usize {
        self.z.ncols()
    }

    fn m(&self) -> usize {
        self.x.ncols()
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn moment(&self, theta: &DVector<f64>, t: usize) -> DVector<f64> {
        let u = self.y[t] - self.x.row(t).transpose().dot(theta);
        self.z.row(t).transpose() * u
    }

    fn moment_derivative(&self, _theta: &DVector<f64>, t: usize) -> DMatrix<f64> {
        -self.z.row(t).transpose() * self.x.row(t)
    }

    fn linear_parts(&self) -> Option<&LinearModelParts> {
        Some(&self.parts)
    }

    fn evaluate(&self, theta: &DVector<f64>) -> Result<MomentEvaluation> {
        if !self.iid {
            return crate::moments::evaluate_generic(self, theta, false);
        }
        let m = self.m();
        let k = self.k_f();
        if theta.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} elements, model expects {m}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite theta".into()));
        }

        let f_t = &self.sigma_zy - &self.sigma_zx * theta;
        let q_t = -self.sigma_zx.clone();

        // c = Omega (1, -theta')': covariances of (u(theta), V) errors.
        let mut xvec = DVector::zeros(m + 1);
        xvec[0] = 1.0;
        for i in 0..m {
            xvec[i + 1] = -theta[i];
        }
        let c = &self.omega * &xvec;
        let sigma_uu = xvec.dot(&c);
        if sigma_uu <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eig: sigma_uu });
        }

        let v_ff = &self.q_zz * sigma_uu;
        let v_ff_pd = SymPd::new(&v_ff, false)?;
        let v_theta_f: Vec<DMatrix<f64>> = (0..m).map(|i| &self.q_zz * -c[i + 1]).collect();

        let omega_vv = self.omega.view((1, 1), (m, m)).into_owned();
        let c_x = DVector::from_fn(m, |i, _| c[i + 1]);
        let left_tt = omega_vv.clone();
        let left_ttf = &omega_vv - (&c_x * c_x.transpose()) / sigma_uu;

        let kron = |left: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(m * k, m * k);
            for i in 0..m {
                for j in 0..m {
                    out.view_mut((i * k, j * k), (k, k))
                        .copy_from(&(&self.q_zz * left[(i, j)]));
                }
            }
            out
        };

        let vf = v_ff_pd.solve_vec(&f_t);
        let mut d_hat = q_t.clone();
        for i in 0..m {
            let corr = &v_theta_f[i] * &vf;
            let mut col = d_hat.column_mut(i);
            col -= corr;
        }

        Ok(MomentEvaluation {
            theta: theta.clone(),
            f_t,
            q_t,
            v_ff,
            v_theta_f,
            v_theta_theta: kron(&left_tt),
            v_theta_theta_f: kron(&left_ttf),
            d_hat,
            n_obs: self.n_obs(),
            v_ff_pd,
        })
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    /// Simulates a linear IV data set with first-stage strength `pi_scale`
    /// and true coefficient `theta0`.
    pub fn simulate_iv_data(
        t: usize,
        k: usize,
        theta0: f64,
        pi_scale: f64,
        seed: u64,
    ) -> IvData {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let z = DMatrix::from_fn(t, k, |_, _| normal());
        let mut x = DMatrix::zeros(t, 1);
        let mut y = DVector::zeros(t);
        for i in 0..t {
            let v = normal();
            let eps = 0.5 * v + normal() * 0.8;
            let zsum: f64 = (0..k).map(|j| z[(i, j)]).sum();
            x[(i, 0)] = pi_scale * zsum + v;
            y[i] = theta0 * x[(i, 0)] + eps;
        }
        IvData::new(y, x, z)
    }
}
