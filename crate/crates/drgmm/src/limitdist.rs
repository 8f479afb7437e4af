//! The asymptotic (limit-experiment) layer: samplers for the limiting law
//! of the DRLM statistic, drifting means for power curves, the structural
//! singular value decomposition and the noncentrality formulas of the
//! maximal invariant.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::SymPd;
use crate::moments::MomentEvaluation;
use crate::stats::conditional_cv;

/// Gaussian limit experiment parameters: the mean `mu_bar` of the
/// whitened moment vector and the mean `D_bar` of the whitened Jacobian,
/// orthogonal columnwise.
#[derive(Debug, Clone)]
pub struct LimitExperimentParams {
    pub mu_bar: DVector<f64>,
    pub d_bar: DMatrix<f64>,
}

impl LimitExperimentParams {
    pub fn new(mu_bar: DVector<f64>, d_bar: DMatrix<f64>) -> Result<Self> {
        if d_bar.nrows() != mu_bar.len() {
            return Err(Error::DimensionMismatch(
                "mu_bar and D_bar must have the same number of rows".into(),
            ));
        }
        let cross = d_bar.transpose() * &mu_bar;
        if cross.amax() > 1e-12 * (1.0 + mu_bar.norm() * d_bar.norm()) {
            return Err(Error::InvalidParameter(format!(
                "mu_bar' D_bar must vanish columnwise, got max |cross| = {:.3e}",
                cross.amax()
            )));
        }
        Ok(LimitExperimentParams { mu_bar, d_bar })
    }

    /// Means under a drifting pseudo-true value: orthogonality holds only
    /// under the null, so it is not enforced here.
    pub fn drifted(mu_bar: DVector<f64>, d_bar: DMatrix<f64>) -> Self {
        LimitExperimentParams { mu_bar, d_bar }
    }

    /// Canonical orthogonal configuration: `mu_bar` of squared length
    /// `mu_sq` along the first axis, a single `D_bar` column of squared
    /// length `d_sq` along the second.
    pub fn from_lengths(n: usize, mu_sq: f64, d_sq: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::DimensionMismatch("need at least two moments".into()));
        }
        let mut mu = DVector::zeros(n);
        mu[0] = mu_sq.sqrt();
        let mut d = DMatrix::zeros(n, 1);
        d[(1, 0)] = d_sq.sqrt();
        LimitExperimentParams::new(mu, d)
    }

    pub fn n(&self) -> usize {
        self.mu_bar.len()
    }

    pub fn m(&self) -> usize {
        self.d_bar.ncols()
    }

    /// One draw of the limit experiment: `x_mu = mu_bar + psi_f`,
    /// `x_d = D_bar + Psi` with independent standard normal entries.
    pub fn draw(&self, rng: &mut impl rand::Rng) -> LimitDraw {
        let n = self.n();
        let m = self.m();
        let psi_f = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let psi_d = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng));
        LimitDraw {
            x_mu: &self.mu_bar + &psi_f,
            x_d: &self.d_bar + &psi_d,
            psi_f,
            psi_d,
        }
    }
}

/// A realization of the limit experiment.
#[derive(Debug, Clone)]
pub struct LimitDraw {
    pub x_mu: DVector<f64>,
    pub x_d: DMatrix<f64>,
    pub psi_f: DVector<f64>,
    pub psi_d: DMatrix<f64>,
}

/// Statistic values of one limit-experiment draw.
#[derive(Debug, Clone, Copy)]
pub struct LimitStatistics {
    pub drlm: f64,
    pub klm: f64,
    pub ar: f64,
    /// `x_d' x_d` for m = 1; the conditioning/identification statistic.
    pub rank: f64,
}

/// DRLM, KLM and AR in the limit experiment, any `m`:
/// numerator `psi_f'(D_bar + Psi) + mu_bar' Psi`, DRLM weight
/// `(x_mu' x_mu) I_m + x_d' x_d`.
pub fn limit_statistics(params: &LimitExperimentParams, draw: &LimitDraw) -> Result<LimitStatistics> {
    let m = params.m();
    let score = draw.x_d.transpose() * &draw.psi_f + draw.psi_d.transpose() * &params.mu_bar;
    let ar = draw.x_mu.dot(&draw.x_mu);
    let gram_d = draw.x_d.transpose() * &draw.x_d;
    let weight = DMatrix::identity(m, m) * ar + &gram_d;
    let weight_pd = SymPd::new(&weight, false).map_err(|_| Error::DegenerateTest {
        f_norm: draw.x_mu.norm(),
        d_norm: draw.x_d.norm(),
    })?;
    let drlm = weight_pd.inv_quad(&score);
    let klm = match SymPd::new(&gram_d, false) {
        Ok(pd) => pd.inv_quad(&score),
        Err(_) => f64::INFINITY,
    };
    Ok(LimitStatistics {
        drlm,
        klm,
        ar,
        rank: if m == 1 { gram_d[(0, 0)] } else { gram_d.trace() },
    })
}

/// The scalar-parameter limit experiment reduced to the three invariants
/// `(ar, cross, rank)` of the 2 x 2 Gram matrix of `(x_mu, x_d)`. Every
/// statistic along the projective line of tested values is a closed-form
/// rotation of these.
#[derive(Debug, Clone, Copy)]
pub struct LimitProfile {
    pub ar: f64,
    pub cross: f64,
    pub rank: f64,
}

impl LimitProfile {
    pub fn from_draw(draw: &LimitDraw) -> Self {
        debug_assert_eq!(draw.x_d.ncols(), 1);
        let d = draw.x_d.column(0);
        LimitProfile {
            ar: draw.x_mu.dot(&draw.x_mu),
            cross: draw.x_mu.dot(&d),
            rank: d.dot(&d),
        }
    }

    /// The theta-constant sum `ar + rank`.
    pub fn constant_sum(&self) -> f64 {
        self.ar + self.rank
    }

    /// AR statistic at the rotated tested value `psi = atan(t)`.
    pub fn ar_at(&self, psi: f64) -> f64 {
        let (c, s) = (psi.cos(), psi.sin());
        c * c * self.ar + 2.0 * c * s * self.cross + s * s * self.rank
    }

    /// Score cross-term at `psi`.
    pub fn cross_at(&self, psi: f64) -> f64 {
        let two = 2.0 * psi;
        two.cos() * self.cross + 0.5 * two.sin() * (self.rank - self.ar)
    }

    pub fn rank_at(&self, psi: f64) -> f64 {
        self.constant_sum() - self.ar_at(psi)
    }

    pub fn drlm_at(&self, psi: f64) -> f64 {
        let s = self.cross_at(psi);
        s * s / self.constant_sum()
    }

    pub fn klm_at(&self, psi: f64) -> f64 {
        let s = self.cross_at(psi);
        let r = self.rank_at(psi);
        if r <= 0.0 {
            f64::INFINITY
        } else {
            s * s / r
        }
    }

    /// Smallest eigenvalue of the Gram matrix: the J statistic
    /// (minimum of AR over the projective line).
    pub fn j_statistic(&self) -> f64 {
        let tr = self.constant_sum();
        let disc = ((self.ar - self.rank).powi(2) + 4.0 * self.cross * self.cross).sqrt();
        0.5 * (tr - disc)
    }

    /// Likelihood ratio statistic at `psi = 0`: `AR - J`.
    pub fn lr(&self) -> f64 {
        self.ar - self.j_statistic()
    }

    /// Location (psi) of the CUE: the minimizing direction of the Gram
    /// quadratic form, in `(-pi/2, pi/2]`.
    pub fn cue_psi(&self) -> f64 {
        // Eigenvector for the smallest eigenvalue of [[ar, cross], [cross, rank]].
        let j = self.j_statistic();
        let (a, b) = (self.ar - j, self.cross);
        // (a, b) dot v = 0 for the eigenvector v.
        let psi = if a.abs() > 1e-14 * (1.0 + self.ar) || b.abs() > 0.0 {
            (-a).atan2(b)
        } else {
            0.0
        };
        // Map the direction to (-pi/2, pi/2].
        normalize_psi(psi)
    }

    /// The two maximizers of the DRLM statistic on the psi-circle (where
    /// the AR statistic equals half the constant sum), in `(-pi/2, pi/2]`.
    pub fn drlm_maximizer_psis(&self) -> [f64; 2] {
        let base = 0.5 * (self.rank - self.ar).atan2(2.0 * self.cross);
        [normalize_psi(base), normalize_psi(base + std::f64::consts::FRAC_PI_2)]
    }

    /// Conditional critical value conditioning variable at `psi`.
    pub fn conditioning_at(&self, psi: f64) -> f64 {
        self.ar_at(psi).max(self.rank_at(psi))
    }
}

/// Maps an angle to the projective fundamental domain `(-pi/2, pi/2]`.
pub fn normalize_psi(psi: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let mut p = psi % pi;
    if p <= -pi / 2.0 {
        p += pi;
    } else if p > pi / 2.0 {
        p -= pi;
    }
    p
}

/// Summary of a limit-experiment simulation.
#[derive(Debug, Clone)]
pub struct LimitSample {
    pub reps: usize,
    pub drlm_reject: usize,
    pub klm_reject: usize,
    pub ar_reject: usize,
    /// The raw DRLM statistic stream, in replication order.
    pub drlm_values: Vec<f64>,
}

impl LimitSample {
    pub fn drlm_frequency(&self) -> f64 {
        self.drlm_reject as f64 / self.reps as f64
    }

    pub fn klm_frequency(&self) -> f64 {
        self.klm_reject as f64 / self.reps as f64
    }

    pub fn ar_frequency(&self) -> f64 {
        self.ar_reject as f64 / self.reps as f64
    }
}

/// Critical-value policy inside the limit experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LimitPolicy {
    FixedChi2,
    Conditional,
}

/// Simulates the limit law of the DRLM statistic (with KLM and AR
/// analogues) under the null, `reps` independent replications on
/// deterministic per-replication substreams of `seed`.
pub fn sample_limit_drlm(
    params: &LimitExperimentParams,
    reps: usize,
    seed: u64,
    policy: LimitPolicy,
    alpha: f64,
) -> Result<LimitSample> {
    use rayon::prelude::*;
    let m = params.m();
    let n = params.n();
    let drlm_cv_fixed = crate::stats::chi2_cv(m, alpha);
    let klm_cv = crate::stats::chi2_cv(m, alpha);
    let ar_cv = crate::stats::chi2_cv(n, alpha);

    let results: Vec<(f64, bool, bool, bool)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let draw = params.draw(&mut rng);
            // Scalar parameters go through the profile arithmetic — the
            // same code path the power-curve generator uses — so statistic
            // streams agree bitwise across the two entry points.
            let stats = if m == 1 {
                let profile = LimitProfile::from_draw(&draw);
                LimitStatistics {
                    drlm: profile.drlm_at(0.0),
                    klm: profile.klm_at(0.0),
                    ar: profile.ar_at(0.0),
                    rank: profile.rank_at(0.0),
                }
            } else {
                limit_statistics(params, &draw).unwrap_or(LimitStatistics {
                    drlm: f64::INFINITY,
                    klm: f64::INFINITY,
                    ar: f64::INFINITY,
                    rank: 0.0,
                })
            };
            let cv = match policy {
                LimitPolicy::FixedChi2 => drlm_cv_fixed,
                LimitPolicy::Conditional => {
                    conditional_cv(stats.ar.max(stats.rank), alpha).unwrap_or(drlm_cv_fixed)
                }
            };
            (
                stats.drlm,
                stats.drlm > cv,
                stats.klm > klm_cv,
                stats.ar > ar_cv,
            )
        })
        .collect();

    let mut sample = LimitSample {
        reps,
        drlm_reject: 0,
        klm_reject: 0,
        ar_reject: 0,
        drlm_values: Vec::with_capacity(reps),
    };
    for (v, d, k, a) in results {
        sample.drlm_values.push(v);
        sample.drlm_reject += d as usize;
        sample.klm_reject += k as usize;
        sample.ar_reject += a as usize;
    }
    Ok(sample)
}

/// Drifting means of the whitened moment and Jacobian at the tested value
/// zero when the pseudo-true value is `lambda_star` (scalar parameter,
/// unit factor variance):
/// `mean_f = (mu_bar - D_bar l*) / sqrt(1 + l*^2)`,
/// `mean_D = (D_bar + mu_bar l*) / sqrt(1 + l*^2)`.
pub fn drifting_means(
    lambda_star: f64,
    mu_bar: &DVector<f64>,
    d_bar: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let scale = 1.0 / (1.0 + lambda_star * lambda_star).sqrt();
    let mean_f = (mu_bar - d_bar * lambda_star) * scale;
    let mean_d = (d_bar + mu_bar * lambda_star) * scale;
    (mean_f, mean_d)
}

/// The structural singular value decomposition of the scaled stacked
/// moment matrix `Omega^{-1/2} (mu_R : beta) diag(1, Q^{1/2})`.
#[derive(Debug, Clone)]
pub struct StructuralDecomposition {
    /// Recentered population Jacobian at the pseudo-true value, `N x m`.
    pub d_star: DMatrix<f64>,
    /// Pseudo-true value; entries may be infinite.
    pub lambda_star: DVector<f64>,
    /// Misspecification direction coefficients, `(N - m)`-vector.
    pub delta: DVector<f64>,
    /// Orthogonal complement with `D_perp' D_star = 0`,
    /// `D_perp' Omega D_perp = I`.
    pub d_perp: DMatrix<f64>,
    /// Set when the two smallest singular values (numerically) coincide.
    pub degenerate: bool,
}

/// Computes the structural decomposition from population (or sample)
/// quantities, scaled by `sqrt(t_scale)`.
pub fn svd_structural(
    mu_r: &DVector<f64>,
    beta: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    q_ff: &DMatrix<f64>,
    t_scale: f64,
) -> Result<StructuralDecomposition> {
    let n = mu_r.len();
    let m = beta.ncols();
    if beta.nrows() != n || omega.nrows() != n || q_ff.nrows() != m {
        return Err(Error::DimensionMismatch(
            "inconsistent dimensions in structural decomposition inputs".into(),
        ));
    }
    let omega_pd = SymPd::new(omega, false)?;
    let q_pd = SymPd::new(q_ff, false)?;
    let sqrt_t = t_scale.sqrt();

    let mut stacked = DMatrix::zeros(n, m + 1);
    stacked.set_column(0, &(mu_r * sqrt_t));
    for j in 0..m {
        stacked.set_column(j + 1, &(beta.column(j) * sqrt_t));
    }
    let target = omega_pd.inv_sqrt() * stacked * append_diag(1.0, &q_pd.sqrt());

    let svd = target.clone().svd(true, true);
    let mut u_full = complete_u(&svd.u.clone().expect("svd with u"), n);
    let mut v = svd.v_t.clone().expect("svd with v_t").transpose();
    let sing = &svd.singular_values;

    // Deterministic signs: flip (u_j, v_j) pairs so u_j's largest entry is
    // positive. Null-space columns of u (beyond m+1) get their own fix.
    for j in 0..m + 1 {
        let col = u_full.column(j);
        let mut pivot = 0.0f64;
        for &x in col.iter() {
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            let flipped = -u_full.column(j).into_owned();
            u_full.set_column(j, &flipped);
            let vf = -v.column(j).into_owned();
            v.set_column(j, &vf);
        }
    }
    for j in m + 1..n {
        let col = u_full.column(j);
        let mut pivot = 0.0f64;
        for &x in col.iter() {
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            let flipped = -u_full.column(j).into_owned();
            u_full.set_column(j, &flipped);
        }
    }

    let degenerate = sing.len() > m && {
        let gap = (sing[m - 1] - sing[m]).abs();
        gap < 1e-10 * sing[0].max(1.0)
    };

    // Block extraction.
    let u1 = u_full.columns(0, m).into_owned();
    let s1 = DMatrix::from_diagonal(&DVector::from_fn(m, |i, _| sing[i]));
    let v11 = v.view((0, 0), (1, m)).into_owned(); // 1 x m
    let v21 = v.view((1, 0), (m, m)).into_owned(); // m x m
    let v12 = v[(0, m)]; // scalar
    let u22 = u_full.view((m, m), (n - m, n - m)).into_owned();
    let s2 = {
        let mut s = DMatrix::zeros(n - m, 1);
        s[(0, 0)] = sing[m];
        s
    };

    let d_star =
        -(omega_pd.sqrt() * &u1 * &s1 * v21.transpose() * q_pd.inv_sqrt());

    let lambda_star = match v21.transpose().try_inverse() {
        Some(v21_t_inv) => {
            let lam = q_pd.sqrt() * v21_t_inv * v11.transpose();
            DVector::from_fn(m, |i, _| {
                let x = lam[(i, 0)];
                if x.abs() > 1e12 {
                    f64::INFINITY * x.signum()
                } else {
                    x
                }
            })
        }
        None => DVector::from_element(m, f64::INFINITY),
    };

    let u22_gram = &u22 * u22.transpose();
    let u22_gram_pd = SymPd::new(&u22_gram, true)?;
    let sign_v12 = if v12 < 0.0 { -1.0 } else { 1.0 };
    let delta_mat = u22_gram_pd.inv_sqrt() * &u22 * &s2 * sign_v12;
    let delta = delta_mat.column(0).into_owned();

    // The orthogonal complement paired with this delta: rotating U2 by the
    // orthogonal polar factor of U22 makes the decomposition identity hold
    // exactly.
    let u2 = u_full.columns(m, n - m).into_owned();
    let d_perp = omega_pd.inv_sqrt() * u2 * u22.transpose() * u22_gram_pd.inv_sqrt();

    Ok(StructuralDecomposition {
        d_star,
        lambda_star,
        delta,
        d_perp,
        degenerate,
    })
}

fn append_diag(top: f64, rest: &DMatrix<f64>) -> DMatrix<f64> {
    let m = rest.nrows();
    let mut out = DMatrix::zeros(m + 1, m + 1);
    out[(0, 0)] = top;
    out.view_mut((1, 1), (m, m)).copy_from(rest);
    out
}

/// Completes the thin-SVD `u` (n x r) to a full orthonormal basis of R^n
/// by Gram-Schmidt against the identity.
fn complete_u(u_thin: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let r = u_thin.ncols();
    if r == n {
        return u_thin.clone();
    }
    let mut cols: Vec<DVector<f64>> = (0..r).map(|j| u_thin.column(j).into_owned()).collect();
    let mut e = 0usize;
    while cols.len() < n && e < n {
        let mut cand = DVector::zeros(n);
        cand[e] = 1.0;
        for c in &cols {
            let proj = c.dot(&cand);
            cand -= c * proj;
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            cols.push(cand / norm);
        }
        e += 1;
    }
    let mut out = DMatrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// The maximal invariant triple at a tested value: `(S_pp, S_lp, S_ll)` =
/// (AR, whitened cross term, identification statistic).
pub fn maximal_invariant(eval: &MomentEvaluation) -> Result<(f64, f64, f64)> {
    if eval.m() != 1 {
        return Err(Error::Unsupported(
            "the maximal invariant triple is defined for m = 1".into(),
        ));
    }
    let t = eval.n_obs as f64;
    let s_pp = eval.cue_objective_scaled();
    let vttf_pd = SymPd::new(&eval.v_theta_theta_f, false)?;
    let d = eval.d_hat.column(0).into_owned();
    let s_ll = t * vttf_pd.inv_quad(&d);
    let wf = eval.v_ff_pd().inv_sqrt() * &eval.f_t;
    let wd = vttf_pd.inv_sqrt() * &d;
    let s_lp = t * wf.dot(&wd);
    Ok((s_pp, s_lp, s_ll))
}

/// Noncentrality matrix of the 2x2 maximal invariant for a scalar risk
/// premium: the misspecification branch of the noncentral Wishart mean;
/// the correct-specification branch is the special case `delta = 0`.
/// `d_star` and `delta` follow the structural decomposition; `omega` is
/// the error covariance.
pub fn noncentrality(
    lambda1: f64,
    lambda_star: f64,
    d_star: &DVector<f64>,
    delta: &DVector<f64>,
    q_ff: f64,
    omega: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let omega_pd = SymPd::new(omega, false)?;
    let d_quad = omega_pd.inv_quad(d_star);
    let delta_sq = delta.dot(delta);

    let a1 = (lambda_star - lambda1) / (1.0 + lambda1 * lambda1 / q_ff).sqrt();
    let a2 = (q_ff + lambda_star * lambda1) / (q_ff + lambda1 * lambda1).sqrt();
    let c1 = DVector::from_vec(vec![a1, a2]);

    let b1 = (1.0 + lambda_star * lambda1 / q_ff) / (1.0 + lambda1 * lambda1 / q_ff).sqrt();
    let b2 = -(lambda_star - lambda1) / (q_ff + lambda1 * lambda1).sqrt();
    let c2 = DVector::from_vec(vec![b1, b2]);

    let shrink = 1.0 / (1.0 + lambda_star * lambda_star / q_ff);
    Ok(&c1 * c1.transpose() * d_quad + &c2 * c2.transpose() * (shrink * delta_sq))
}

/// Samples the maximal invariant as the Gram matrix of a `t x 2` Gaussian
/// matrix whose mean carries a square root of the noncentrality; the
/// expected Gram matrix is `noncentrality + t I`.
pub fn sample_wishart_gram(
    noncentrality: &DMatrix<f64>,
    t_dof: usize,
    rng: &mut impl rand::Rng,
) -> Result<DMatrix<f64>> {
    if noncentrality.nrows() != 2 || noncentrality.ncols() != 2 {
        return Err(Error::DimensionMismatch("noncentrality must be 2 x 2".into()));
    }
    if t_dof < 2 {
        return Err(Error::InvalidParameter("need at least 2 degrees of freedom".into()));
    }
    let root = SymPd::new(noncentrality, true)?.sqrt();
    let mut g: DMatrix<f64> = DMatrix::from_fn(t_dof, 2, |_, _| StandardNormal.sample(rng));
    for i in 0..2 {
        for j in 0..2 {
            g[(i, j)] += root[(i, j)];
        }
    }
    Ok(g.transpose() * g)
}
