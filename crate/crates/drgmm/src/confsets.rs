//! Test inversion into confidence sets for one- and two-dimensional
//! parameters, including unbounded sets, plus the Fama-MacBeth two-pass
//! estimator used for the point-estimate columns of the empirical tables.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::SymPd;
use crate::models::FactorData;
use crate::moments::MomentModel;
use crate::solver::{cue_estimate, SolverConfig};
use crate::stats::{chi2_cv, clr_critical_value, conditional_lr, drlm, gmm_ar, klm, CriticalValuePolicy};

/// Which statistic to invert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InvertStatistic {
    Ar,
    Klm,
    Drlm,
    DrlmEnhanced,
    Lr,
}

impl InvertStatistic {
    pub fn name(&self) -> &'static str {
        match self {
            InvertStatistic::Ar => "AR",
            InvertStatistic::Klm => "KLM",
            InvertStatistic::Drlm => "DRLM",
            InvertStatistic::DrlmEnhanced => "DRLM-enhanced",
            InvertStatistic::Lr => "LR",
        }
    }
}

/// A union of disjoint closed intervals on the extended real line.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet1D {
    /// Ordered disjoint intervals; infinite endpoints encode unbounded
    /// pieces.
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
    pub statistic: String,
    pub grid_size: usize,
    pub atan_scale: f64,
}

impl ConfidenceSet1D {
    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| x >= a && x <= b)
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn is_subset_of(&self, other: &ConfidenceSet1D, tol: f64) -> bool {
        self.intervals.iter().all(|&(a, b)| {
            other.intervals.iter().any(|&(c, d)| {
                a >= c - tol && b <= d + tol
            })
        })
    }

    /// JSON with infinite endpoints encoded as the strings "inf"/"-inf".
    pub fn to_json(&self) -> serde_json::Value {
        let enc = |x: f64| -> serde_json::Value {
            if x == f64::INFINITY {
                serde_json::Value::String("inf".into())
            } else if x == f64::NEG_INFINITY {
                serde_json::Value::String("-inf".into())
            } else {
                serde_json::json!(x)
            }
        };
        serde_json::json!({
            "statistic": self.statistic,
            "level": self.level,
            "grid_size": self.grid_size,
            "atan_scale": self.atan_scale,
            "intervals": self.intervals.iter().map(|&(a, b)| serde_json::json!([enc(a), enc(b)])).collect::<Vec<_>>(),
        })
    }
}

/// Evaluates the excess `statistic - critical value` at theta; positive
/// means rejection.
fn excess<M: MomentModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    statistic: InvertStatistic,
    policy: &CriticalValuePolicy,
) -> f64 {
    let alpha = policy.alpha();
    let eval = match model.evaluate(theta) {
        Ok(e) => e,
        Err(_) => return f64::INFINITY, // singular evaluation: rejected cell
    };
    let res = match statistic {
        InvertStatistic::Ar => gmm_ar(&eval, alpha),
        InvertStatistic::Klm => klm(&eval, alpha),
        InvertStatistic::Drlm | InvertStatistic::DrlmEnhanced => drlm(&eval, policy),
        InvertStatistic::Lr => conditional_lr(&eval, alpha),
    };
    match res {
        Ok(r) => r.value - r.critical_value,
        Err(_) => f64::INFINITY,
    }
}

/// Inverts a test into a one-dimensional confidence set on an
/// atan-reparameterized grid covering the extended real line. Interval
/// endpoints are refined by bisection to `1e-4` in psi-space.
pub fn invert_1d<M: MomentModel + ?Sized>(
    model: &M,
    statistic: InvertStatistic,
    policy: &CriticalValuePolicy,
    config: &SolverConfig,
) -> Result<ConfidenceSet1D> {
    if model.m() != 1 {
        return Err(Error::Unsupported(
            "one-dimensional inversion requires a scalar parameter".into(),
        ));
    }
    let psis = config.psi_grid();
    let n = psis.len();
    let mut accept = vec![false; n];
    for (i, &psi) in psis.iter().enumerate() {
        let theta = DVector::from_vec(vec![config.theta_of_psi(psi)]);
        accept[i] = excess(model, &theta, statistic, policy) <= 0.0;
    }

    if statistic == InvertStatistic::DrlmEnhanced {
        apply_enhancement_mask(model, config, &psis, &mut accept, policy)?;
    }

    // Assemble intervals in psi space; the first/last grid cells extend to
    // the poles (theta = -inf / +inf).
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let refine = |lo: f64, hi: f64| -> f64 {
        // One endpoint accepted, the other rejected: bisection to 1e-4.
        let (mut a, mut b) = (lo, hi);
        let accept_a = {
            let theta = DVector::from_vec(vec![config.theta_of_psi(a)]);
            excess(model, &theta, statistic, policy) <= 0.0
        };
        for _ in 0..0x20 {
            if (b - a).abs() < 1e-4 {
                break;
            }
            let mid = 0.5 * (a + b);
            let theta = DVector::from_vec(vec![config.theta_of_psi(mid)]);
            let acc = excess(model, &theta, statistic, policy) <= 0.0;
            if acc == accept_a {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };

    let mut i = 0;
    while i < n {
        if !accept[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < n && accept[i + 1] {
            i += 1;
        }
        let end = i;
        // The enhancement mask never needs endpoint refinement beyond the
        // plain boundaries it inherits.
        let left = if start == 0 {
            f64::NEG_INFINITY
        } else {
            config.theta_of_psi(refine(psis[start - 1], psis[start]))
        };
        let right = if end == n - 1 {
            f64::INFINITY
        } else {
            config.theta_of_psi(refine(psis[end + 1], psis[end]))
        };
        intervals.push((left, right));
        i += 1;
    }

    Ok(ConfidenceSet1D {
        intervals,
        level: 1.0 - policy.alpha(),
        statistic: statistic.name().to_string(),
        grid_size: config.grid_size,
        atan_scale: config.atan_scale,
    })
}

/// Power-enhancement on the accepted mask. Linear models get the exact
/// rule: when both DRLM maximizers are significant, reject everything in
/// the closed maximizer interval not containing the CUE. Nonlinear
/// models fall back to keeping the accepted component connected to the
/// CUE on the projective psi-circle.
fn apply_enhancement_mask<M: MomentModel + ?Sized>(
    model: &M,
    config: &SolverConfig,
    psis: &[f64],
    accept: &mut [bool],
    policy: &CriticalValuePolicy,
) -> Result<()> {
    let n = psis.len();
    if accept.iter().all(|&a| a) || accept.iter().all(|&a| !a) {
        return Ok(());
    }
    let sol = cue_estimate(model, config)?;

    if let Some(parts) = model.linear_parts() {
        let (profile, b_sqrt) = crate::solver::linear_profile(parts, model.n_obs())?;
        let maxima = profile.drlm_maximizer_psis();
        let cv_at = |psi: f64| -> f64 {
            policy
                .drlm_critical_value(1, profile.conditioning_at(psi))
                .unwrap_or(chi2_cv(1, 0.05))
        };
        let significant = profile.drlm_at(maxima[0]) > cv_at(maxima[0])
            && profile.drlm_at(maxima[1]) > cv_at(maxima[1]);
        if !significant {
            return Ok(());
        }
        let psi_cue = crate::solver::profile_psi_of_theta(&b_sqrt, sol.cue[0]);
        for (i, &psi_grid) in psis.iter().enumerate() {
            if !accept[i] {
                continue;
            }
            let theta = config.theta_of_psi(psi_grid);
            let psi_model = crate::solver::profile_psi_of_theta(&b_sqrt, theta);
            if !crate::solver::same_arc(psi_model, psi_cue, maxima) {
                accept[i] = false;
            }
        }
        return Ok(());
    }

    // Nonlinear fallback: connected component of the CUE.
    let cue_psi = config.psi_of_theta(sol.cue[0]);
    let mut cue_idx = 0usize;
    let mut best = f64::INFINITY;
    for (i, &psi) in psis.iter().enumerate() {
        let d = (psi - cue_psi).abs();
        if d < best {
            best = d;
            cue_idx = i;
        }
    }
    if !accept[cue_idx] {
        let mut found = None;
        for off in 1..n {
            let lo = cue_idx.checked_sub(off);
            let hi = if cue_idx + off < n { Some(cue_idx + off) } else { None };
            if let Some(l) = lo {
                if accept[l] {
                    found = Some(l);
                    break;
                }
            }
            if let Some(h) = hi {
                if accept[h] {
                    found = Some(h);
                    break;
                }
            }
        }
        cue_idx = match found {
            Some(idx) => idx,
            None => return Ok(()),
        };
    }
    let mut keep = vec![false; n];
    let mut stack = vec![cue_idx];
    keep[cue_idx] = true;
    while let Some(i) = stack.pop() {
        let neighbors = [(i + 1) % n, (i + n - 1) % n];
        for &j in &neighbors {
            if accept[j] && !keep[j] {
                keep[j] = true;
                stack.push(j);
            }
        }
    }
    for i in 0..n {
        accept[i] = keep[i];
    }
    Ok(())
}

/// A two-dimensional confidence set: acceptance mask over the atan grid
/// plus its projections on each axis.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet2D {
    pub psi_axis_1: Vec<f64>,
    pub psi_axis_2: Vec<f64>,
    pub theta_axis_1: Vec<f64>,
    pub theta_axis_2: Vec<f64>,
    /// Row-major acceptance mask: `mask[i][j]` for axis-1 index `i`.
    pub mask: Vec<Vec<bool>>,
    pub projection_1: Vec<(f64, f64)>,
    pub projection_2: Vec<(f64, f64)>,
    pub level: f64,
    pub statistic: String,
}

impl ConfidenceSet2D {
    pub fn contains(&self, theta: (f64, f64), scale: f64) -> bool {
        let psi1 = (theta.0 / scale).atan();
        let psi2 = (theta.1 / scale).atan();
        let idx = |axis: &[f64], p: f64| -> usize {
            let mut best = 0;
            let mut dist = f64::INFINITY;
            for (i, &a) in axis.iter().enumerate() {
                if (a - p).abs() < dist {
                    dist = (a - p).abs();
                    best = i;
                }
            }
            best
        };
        self.mask[idx(&self.psi_axis_1, psi1)][idx(&self.psi_axis_2, psi2)]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_1,theta_2,accept\n");
        for (i, &t1) in self.theta_axis_1.iter().enumerate() {
            for (j, &t2) in self.theta_axis_2.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", t1, t2, self.mask[i][j] as u8));
            }
        }
        out
    }
}

/// Inverts a test over a two-dimensional atan grid; projections on each
/// axis are the unions over accepted cells.
pub fn invert_2d<M: MomentModel + ?Sized>(
    model: &M,
    statistic: InvertStatistic,
    policy: &CriticalValuePolicy,
    grid_per_axis: usize,
    atan_scale: f64,
) -> Result<ConfidenceSet2D> {
    if model.m() != 2 {
        return Err(Error::Unsupported(
            "two-dimensional inversion requires m = 2".into(),
        ));
    }
    if statistic == InvertStatistic::Lr {
        return Err(Error::Unsupported(
            "the conditional LR inversion is implemented for m = 1".into(),
        ));
    }
    let half = std::f64::consts::FRAC_PI_2;
    let n = grid_per_axis.max(3);
    let step = 2.0 * half / (n + 1) as f64;
    let psis: Vec<f64> = (1..=n).map(|i| -half + i as f64 * step).collect();
    let thetas: Vec<f64> = psis.iter().map(|&p| atan_scale * p.tan()).collect();

    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let theta = DVector::from_vec(vec![thetas[i], thetas[j]]);
            let exc = match statistic {
                InvertStatistic::DrlmEnhanced => excess(model, &theta, InvertStatistic::Drlm, policy),
                s => excess(model, &theta, s, policy),
            };
            mask[i][j] = exc <= 0.0;
        }
    }

    if statistic == InvertStatistic::DrlmEnhanced {
        apply_enhancement_mask_2d(model, &psis, atan_scale, &mut mask)?;
    }

    let project = |along_first: bool| -> Vec<(f64, f64)> {
        let mut intervals = Vec::new();
        let mut run: Option<(usize, usize)> = None;
        for a in 0..n {
            let any = (0..n).any(|b| {
                if along_first {
                    mask[a][b]
                } else {
                    mask[b][a]
                }
            });
            match (any, run) {
                (true, None) => run = Some((a, a)),
                (true, Some((s, _))) => run = Some((s, a)),
                (false, Some((s, e))) => {
                    intervals.push((
                        if s == 0 { f64::NEG_INFINITY } else { thetas[s] },
                        if e == n - 1 { f64::INFINITY } else { thetas[e] },
                    ));
                    run = None;
                }
                (false, None) => {}
            }
        }
        if let Some((s, e)) = run {
            intervals.push((
                if s == 0 { f64::NEG_INFINITY } else { thetas[s] },
                if e == n - 1 { f64::INFINITY } else { thetas[e] },
            ));
        }
        intervals
    };

    Ok(ConfidenceSet2D {
        projection_1: project(true),
        projection_2: project(false),
        psi_axis_1: psis.clone(),
        psi_axis_2: psis,
        theta_axis_1: thetas.clone(),
        theta_axis_2: thetas,
        mask,
        level: 1.0 - policy.alpha(),
        statistic: statistic.name().to_string(),
    })
}

/// 2-D power enhancement: keep the accepted component connected to the
/// CUE cell (4-neighborhood on the grid, with the two psi axes treated as
/// projective circles).
fn apply_enhancement_mask_2d<M: MomentModel + ?Sized>(
    model: &M,
    psis: &[f64],
    atan_scale: f64,
    mask: &mut [Vec<bool>],
) -> Result<()> {
    let n = psis.len();
    let any_accept = mask.iter().any(|row| row.iter().any(|&a| a));
    if !any_accept {
        return Ok(());
    }
    let config = SolverConfig {
        grid_size: 2001,
        atan_scale,
        refine_tol: 1e-8,
    };
    let sol = cue_estimate(model, &config)?;
    let find = |theta: f64| -> usize {
        let p = (theta / atan_scale).atan();
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (i, &a) in psis.iter().enumerate() {
            if (a - p).abs() < dist {
                dist = (a - p).abs();
                best = i;
            }
        }
        best
    };
    let mut start = (find(sol.cue[0]), find(sol.cue[1]));
    if !mask[start.0][start.1] {
        // Nearest accepted cell.
        let mut found = None;
        let mut best = usize::MAX;
        for i in 0..n {
            for j in 0..n {
                if mask[i][j] {
                    let d = i.abs_diff(start.0) + j.abs_diff(start.1);
                    if d < best {
                        best = d;
                        found = Some((i, j));
                    }
                }
            }
        }
        start = match found {
            Some(s) => s,
            None => return Ok(()),
        };
    }
    let mut keep = vec![vec![false; n]; n];
    let mut stack = vec![start];
    keep[start.0][start.1] = true;
    while let Some((i, j)) = stack.pop() {
        let neighbors = [
            ((i + 1) % n, j),
            ((i + n - 1) % n, j),
            (i, (j + 1) % n),
            (i, (j + n - 1) % n),
        ];
        for &(a, b) in &neighbors {
            if mask[a][b] && !keep[a][b] {
                keep[a][b] = true;
                stack.push((a, b));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            mask[i][j] = keep[i][j];
        }
    }
    Ok(())
}

/// Fama-MacBeth two-pass estimates: time-series betas, then per-period
/// cross-sectional regressions of returns on `(1, betas)`; the standard
/// errors come from the time series of cross-sectional estimates.
#[derive(Debug, Clone, Serialize)]
pub struct FamaMacBeth {
    /// Risk premia estimates (excluding the zero-beta intercept).
    pub lambda: Vec<f64>,
    /// Zero-beta (intercept) estimate.
    pub lambda0: f64,
    /// Fama-MacBeth t statistics of the risk premia.
    pub t_stats: Vec<f64>,
    pub standard_errors: Vec<f64>,
}

pub fn fm_two_pass(data: &FactorData) -> Result<FamaMacBeth> {
    let t = data.returns.nrows();
    let n = data.returns.ncols();
    let m = data.factors.ncols();
    if data.factors.nrows() != t {
        return Err(Error::DimensionMismatch(
            "returns and factors must have the same number of rows".into(),
        ));
    }
    // Pass 1: per-asset OLS of returns on (1, factors).
    let mut x = DMatrix::from_element(t, m + 1, 1.0);
    x.view_mut((0, 1), (t, m)).copy_from(&data.factors);
    let gram = x.transpose() * &x;
    let gram_pd = SymPd::new(&gram, false).map_err(|_| Error::RankDeficient("factors".into()))?;
    let coef = gram_pd.solve_mat(&(x.transpose() * &data.returns)); // (m+1) x N
    let betas = coef.rows(1, m).transpose().into_owned(); // N x m

    // Pass 2: per-period cross-sectional OLS of R_t on (1, betas).
    let mut z = DMatrix::from_element(n, m + 1, 1.0);
    z.view_mut((0, 1), (n, m)).copy_from(&betas);
    let zgram = z.transpose() * &z;
    let zgram_pd =
        SymPd::new(&zgram, false).map_err(|_| Error::RankDeficient("beta matrix".into()))?;
    let mut lambda_t = DMatrix::zeros(t, m + 1);
    for s in 0..t {
        let r_s = data.returns.row(s).transpose();
        let lam = zgram_pd.solve_vec(&(z.transpose() * r_s));
        lambda_t.set_row(s, &lam.transpose());
    }
    let mean = lambda_t.row_mean();
    let mut se = vec![0.0; m + 1];
    for j in 0..m + 1 {
        let mut var = 0.0;
        for s in 0..t {
            let d = lambda_t[(s, j)] - mean[j];
            var += d * d;
        }
        var /= (t - 1) as f64;
        se[j] = (var / t as f64).sqrt();
    }
    Ok(FamaMacBeth {
        lambda0: mean[0],
        lambda: (1..=m).map(|j| mean[j]).collect(),
        t_stats: (1..=m)
            .map(|j| if se[j] > 0.0 { mean[j] / se[j] } else { f64::NAN })
            .collect(),
        standard_errors: se[1..].to_vec(),
    })
}

/// Convenience: the conditional-LR inversion needs the J statistic once
/// per model; expose the CLR critical value for reporting.
pub fn lr_reference(k_f: usize, rank_stat: f64, alpha: f64) -> (f64, f64) {
    (clr_critical_value(k_f, rank_stat, alpha), chi2_cv(k_f, alpha))
}
