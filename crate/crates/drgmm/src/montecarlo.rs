//! Seeded, parallel replication engine for the simulation experiments:
//! size surfaces, power curves, J-statistic distribution functions and
//! the CRRA finite-sample experiments.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::limitdist::{drifting_means, LimitExperimentParams, LimitProfile};
use crate::models::{crra_pseudo_true, CrraDgpParams, CrraModel};
use crate::moments::MomentModel;
use crate::stats::{chi2_cv, clr_critical_value, conditional_cv, drlm, gmm_ar, CriticalValuePolicy};

fn mc_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

fn check_axis(axis: &[f64], name: &str) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} axis is empty")));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!(
            "{name} axis must be strictly increasing"
        )));
    }
    Ok(())
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < 100 {
        return Err(Error::InvalidParameter(format!(
            "need at least 100 replications, got {reps}"
        )));
    }
    Ok(())
}

/// Specification of a size-surface experiment over the limit experiment.
#[derive(Debug, Clone, Serialize)]
pub struct SizeSpec {
    /// Moment dimension of the limit experiment.
    pub n: usize,
    /// Squared lengths of `mu_bar` on the first axis.
    pub mu_sq_axis: Vec<f64>,
    /// Squared lengths of `D_bar` on the second axis.
    pub d_sq_axis: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    /// DRLM critical-value policy (fixed chi-square or conditional).
    pub conditional: bool,
    /// Also simulate the size of the power-enhanced DRLM test.
    pub include_enhanced: bool,
}

/// One cell of a rejection surface.
#[derive(Debug, Clone, Serialize)]
pub struct SurfaceCell {
    pub mu_sq: f64,
    pub d_sq: f64,
    pub statistic: String,
    pub frequency: f64,
    pub se: f64,
    /// Non-empty when the cell is reported but is not a size measurement
    /// (the population minimizer sits at infinity).
    pub flag: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RejectionSurface {
    pub mu_sq_axis: Vec<f64>,
    pub d_sq_axis: Vec<f64>,
    pub reps: usize,
    pub cells: Vec<SurfaceCell>,
}

impl RejectionSurface {
    pub fn frequency(&self, statistic: &str, mu_sq: f64, d_sq: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.statistic == statistic && c.mu_sq == mu_sq && c.d_sq == d_sq)
            .map(|c| c.frequency)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu_sq,d_sq,statistic,frequency,se,flag\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.mu_sq, c.d_sq, c.statistic, c.frequency, c.se, c.flag
            ));
        }
        out
    }
}

/// Per-replication decisions of the scalar limit experiment at the tested
/// value `psi = 0`.
struct LimitDecisions {
    drlm: bool,
    drlm_enhanced: bool,
    klm: bool,
    ar: bool,
    lr: bool,
}

fn decide_limit_rep(
    profile: &LimitProfile,
    n: usize,
    alpha: f64,
    conditional: bool,
    with_enhanced: bool,
    with_lr: bool,
) -> LimitDecisions {
    let chi2_m = chi2_cv(1, alpha);
    let drlm_cv = |psi: f64| -> f64 {
        if conditional {
            conditional_cv(profile.conditioning_at(psi), alpha).unwrap_or(chi2_m)
        } else {
            chi2_m
        }
    };
    let drlm0 = profile.drlm_at(0.0);
    let plain = drlm0 > drlm_cv(0.0);
    let enhanced = if with_enhanced {
        plain || enhanced_maximizer_reject(profile, &drlm_cv)
    } else {
        plain
    };
    let klm = profile.klm_at(0.0) > chi2_m;
    let ar = profile.ar_at(0.0) > chi2_cv(n, alpha);
    let lr = if with_lr {
        profile.lr() > clr_critical_value(n, profile.rank_at(0.0), alpha)
    } else {
        false
    };
    LimitDecisions {
        drlm: plain,
        drlm_enhanced: enhanced,
        klm,
        ar,
        lr,
    }
}

/// The power-enhancement screen: reject when both DRLM maximizers are
/// significant and the tested value (at psi = 0) lies in the closed
/// maximizer interval that does not contain the CUE.
fn enhanced_maximizer_reject(profile: &LimitProfile, drlm_cv: &dyn Fn(f64) -> f64) -> bool {
    let maxima = profile.drlm_maximizer_psis();
    let significant = profile.drlm_at(maxima[0]) > drlm_cv(maxima[0])
        && profile.drlm_at(maxima[1]) > drlm_cv(maxima[1]);
    if !significant {
        return false;
    }
    !crate::solver::same_arc(0.0, profile.cue_psi(), maxima)
}

/// Simulates the null rejection frequencies of DRLM (plain and optionally
/// power-enhanced) and KLM over a grid of misspecification and
/// identification lengths.
pub fn run_size_surface(spec: &SizeSpec) -> Result<RejectionSurface> {
    check_axis(&spec.mu_sq_axis, "mu_sq")?;
    check_axis(&spec.d_sq_axis, "d_sq")?;
    check_reps(spec.reps)?;
    let mut cells = Vec::new();
    for (i, &mu_sq) in spec.mu_sq_axis.iter().enumerate() {
        for (j, &d_sq) in spec.d_sq_axis.iter().enumerate() {
            let params = LimitExperimentParams::from_lengths(spec.n, mu_sq, d_sq)?;
            let cell_idx = (i * spec.d_sq_axis.len() + j) as u64;
            let counts: (usize, usize, usize) = (0..spec.reps)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                    rng.set_stream(cell_idx * spec.reps as u64 + rep as u64);
                    let draw = params.draw(&mut rng);
                    let profile = LimitProfile::from_draw(&draw);
                    let d = decide_limit_rep(
                        &profile,
                        spec.n,
                        spec.alpha,
                        spec.conditional,
                        spec.include_enhanced,
                        false,
                    );
                    (d.drlm as usize, d.drlm_enhanced as usize, d.klm as usize)
                })
                .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));

            let flag = if mu_sq > d_sq {
                "minimizer-at-infinity".to_string()
            } else if mu_sq == d_sq && mu_sq > 0.0 {
                "minimizer-not-unique".to_string()
            } else {
                String::new()
            };
            let mut push = |name: &str, count: usize, flagged: bool| {
                let p = count as f64 / spec.reps as f64;
                cells.push(SurfaceCell {
                    mu_sq,
                    d_sq,
                    statistic: name.to_string(),
                    frequency: p,
                    se: mc_se(p, spec.reps),
                    flag: if flagged { flag.clone() } else { String::new() },
                });
            };
            push("DRLM", counts.0, false);
            if spec.include_enhanced {
                push("DRLM-enhanced", counts.1, !flag.is_empty());
            }
            push("KLM", counts.2, false);
        }
    }
    Ok(RejectionSurface {
        mu_sq_axis: spec.mu_sq_axis.clone(),
        d_sq_axis: spec.d_sq_axis.clone(),
        reps: spec.reps,
        cells,
    })
}

/// Specification of a power-curve experiment: fixed hypothesized value 0,
/// pseudo-true value drifting over `lambda_axis`.
#[derive(Debug, Clone, Serialize)]
pub struct PowerSpec {
    pub n: usize,
    /// Squared misspecification length.
    pub mu_sq: f64,
    /// Identification strengths (squared lengths), one curve per entry.
    pub d_sq_list: Vec<f64>,
    /// Pseudo-true values (drift axis).
    pub lambda_axis: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerPoint {
    pub d_sq: f64,
    pub lambda_star: f64,
    pub statistic: String,
    pub frequency: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerCurves {
    pub reps: usize,
    pub points: Vec<PowerPoint>,
}

impl PowerCurves {
    pub fn frequency(&self, statistic: &str, d_sq: f64, lambda_star: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| {
                p.statistic == statistic && p.d_sq == d_sq && p.lambda_star == lambda_star
            })
            .map(|p| p.frequency)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_sq,lambda_star,statistic,frequency,se\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.d_sq, p.lambda_star, p.statistic, p.frequency, p.se
            ));
        }
        out
    }
}

/// Simulates rejection frequencies of DRLM (fixed cv), power-enhanced
/// DRLM (conditional cv), KLM, AR and the conditional LR when testing
/// `lambda = 0` while the pseudo-true value drifts over `lambda_axis`.
pub fn run_power_curve(spec: &PowerSpec) -> Result<PowerCurves> {
    check_reps(spec.reps)?;
    if spec.lambda_axis.is_empty() || spec.d_sq_list.is_empty() {
        return Err(Error::InvalidParameter("empty power grid".into()));
    }
    let mu_bar = {
        let mut v = DVector::zeros(spec.n);
        v[0] = spec.mu_sq.sqrt();
        v
    };
    let mut points = Vec::new();
    for (ci, &d_sq) in spec.d_sq_list.iter().enumerate() {
        let d_bar = {
            let mut v = DVector::zeros(spec.n);
            v[1] = d_sq.sqrt();
            v
        };
        for (li, &lambda_star) in spec.lambda_axis.iter().enumerate() {
            let (mean_f, mean_d) = drifting_means(lambda_star, &mu_bar, &d_bar);
            let params = LimitExperimentParams::drifted(
                mean_f,
                nalgebra::DMatrix::from_column_slice(spec.n, 1, mean_d.as_slice()),
            );
            let cell_idx = (ci * spec.lambda_axis.len() + li) as u64;
            let counts = (0..spec.reps)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                    rng.set_stream(cell_idx * spec.reps as u64 + rep as u64);
                    let draw = params.draw(&mut rng);
                    let profile = LimitProfile::from_draw(&draw);
                    let plain = decide_limit_rep(&profile, spec.n, spec.alpha, false, false, true);
                    let enh = decide_limit_rep(&profile, spec.n, spec.alpha, true, true, false);
                    [
                        plain.drlm as usize,
                        enh.drlm_enhanced as usize,
                        plain.klm as usize,
                        plain.ar as usize,
                        plain.lr as usize,
                    ]
                })
                .reduce(
                    || [0usize; 5],
                    |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3], a[4] + b[4]],
                );
            for (name, count) in [
                ("DRLM", counts[0]),
                ("DRLM-enhanced", counts[1]),
                ("KLM", counts[2]),
                ("AR", counts[3]),
                ("LR", counts[4]),
            ] {
                let p = count as f64 / spec.reps as f64;
                points.push(PowerPoint {
                    d_sq,
                    lambda_star,
                    statistic: name.to_string(),
                    frequency: p,
                    se: mc_se(p, spec.reps),
                });
            }
        }
    }
    Ok(PowerCurves {
        reps: spec.reps,
        points,
    })
}

/// Specification of the J-statistic distribution experiment under the
/// null drift.
#[derive(Debug, Clone, Serialize)]
pub struct JstatSpec {
    pub n: usize,
    pub mu_sq: f64,
    pub d_sq_list: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JstatCurve {
    pub d_sq: f64,
    /// Rejection frequency of the J test at the chi-square(n - 1) critical
    /// value.
    pub rejection: f64,
    pub se: f64,
    /// Empirical distribution function sampled at `cdf_grid`.
    pub cdf: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JstatResult {
    pub critical_value: f64,
    pub cdf_grid: Vec<f64>,
    pub curves: Vec<JstatCurve>,
    pub reps: usize,
}

impl JstatResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_sq,x,cdf\n");
        for c in &self.curves {
            for (x, p) in self.cdf_grid.iter().zip(c.cdf.iter()) {
                out.push_str(&format!("{},{},{}\n", c.d_sq, x, p));
            }
        }
        out
    }
}

/// Simulates the distribution function of the J statistic (minimum AR)
/// in the limit experiment for each identification strength.
pub fn run_jstat_cdf(spec: &JstatSpec) -> Result<JstatResult> {
    check_reps(spec.reps)?;
    let cv = chi2_cv(spec.n - 1, spec.alpha);
    let cdf_grid: Vec<f64> = (0..=80).map(|i| i as f64).collect();
    let mut curves = Vec::new();
    for (ci, &d_sq) in spec.d_sq_list.iter().enumerate() {
        let params = LimitExperimentParams::from_lengths(spec.n, spec.mu_sq, d_sq)?;
        let values: Vec<f64> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(ci as u64 * spec.reps as u64 + rep as u64);
                let draw = params.draw(&mut rng);
                LimitProfile::from_draw(&draw).j_statistic()
            })
            .collect();
        let rejection = values.iter().filter(|&&v| v > cv).count() as f64 / spec.reps as f64;
        let cdf = cdf_grid
            .iter()
            .map(|&x| values.iter().filter(|&&v| v <= x).count() as f64 / spec.reps as f64)
            .collect();
        curves.push(JstatCurve {
            d_sq,
            rejection,
            se: mc_se(rejection, spec.reps),
            cdf,
        });
    }
    Ok(JstatResult {
        critical_value: cv,
        cdf_grid,
        curves,
        reps: spec.reps,
    })
}

/// Axis of the CRRA experiment: vary the misspecification shift in the
/// data generating process, or vary the anchor risk aversion under
/// correct specification.
#[derive(Debug, Clone, Serialize)]
pub enum CrraAxis {
    Misspecification(Vec<f64>),
    TrueGamma(Vec<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct CrraSpec {
    pub axis: CrraAxis,
    pub c_tilde: f64,
    /// Hypothesized gamma; `None` tests each cell's own pseudo-true value.
    pub h0_gamma: Option<f64>,
    pub t_obs: usize,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrraCell {
    /// The axis value (c or gamma0).
    pub at: f64,
    pub c_tilde: f64,
    pub h0_gamma: f64,
    pub pseudo_true: f64,
    pub pseudo_true_at_edge: bool,
    pub drlm_freq: f64,
    pub drlm_conditional_freq: f64,
    pub ar_freq: f64,
    pub reps_used: usize,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrraResult {
    pub cells: Vec<CrraCell>,
}

impl CrraResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "at,c_tilde,h0_gamma,pseudo_true,edge,drlm,drlm_conditional,ar,reps\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.at,
                c.c_tilde,
                c.h0_gamma,
                c.pseudo_true,
                c.pseudo_true_at_edge,
                c.drlm_freq,
                c.drlm_conditional_freq,
                c.ar_freq,
                c.reps_used
            ));
        }
        out
    }
}

/// Finite-sample CRRA experiment: draws data from the log-normal process
/// and tests the hypothesized gamma with the DRLM and GMM-AR statistics.
pub fn run_crra_experiment(spec: &CrraSpec) -> Result<CrraResult> {
    check_reps(spec.reps)?;
    let axis: Vec<(f64, CrraDgpParams)> = match &spec.axis {
        CrraAxis::Misspecification(cs) => cs
            .iter()
            .map(|&c| (c, CrraDgpParams::shipped(c, spec.c_tilde)))
            .collect(),
        CrraAxis::TrueGamma(gammas) => gammas
            .iter()
            .map(|&g| {
                let mut p = CrraDgpParams::shipped(0.0, spec.c_tilde);
                p.gamma0 = g;
                (g, p)
            })
            .collect(),
    };
    let mut cells = Vec::new();
    for (ci, (at, params)) in axis.iter().enumerate() {
        params.validate()?;
        let pt = crra_pseudo_true(params)?;
        let h0 = spec.h0_gamma.unwrap_or(pt.gamma_star);
        let theta0 = DVector::from_vec(vec![h0]);
        let fixed_policy = CriticalValuePolicy::FixedChi2 { alpha: spec.alpha };
        let results: Vec<(u8, u8, u8, u8)> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let stream = ci as u64 * spec.reps as u64 + rep as u64;
                let sampled =
                    crate::models::crra_dgp_sample_stream(params, spec.t_obs, spec.seed, stream);
                let (cons, rets) = match sampled {
                    Ok(v) => v,
                    Err(_) => return (0, 0, 0, 0),
                };
                let model = match CrraModel::new(&cons, &rets, params.delta0) {
                    Ok(m) => m,
                    Err(_) => return (0, 0, 0, 0),
                };
                let eval = match model.evaluate(&theta0) {
                    Ok(e) => e,
                    Err(_) => return (0, 0, 0, 0),
                };
                let d_fixed = drlm(&eval, &fixed_policy).map(|r| r.reject).unwrap_or(false);
                let d_cond = drlm(&eval, &CriticalValuePolicy::ConditionalCalibrated)
                    .map(|r| r.reject)
                    .unwrap_or(false);
                let a = gmm_ar(&eval, spec.alpha).map(|r| r.reject).unwrap_or(false);
                (1, d_fixed as u8, d_cond as u8, a as u8)
            })
            .collect();
        let used: usize = results.iter().map(|r| r.0 as usize).sum();
        if used == 0 {
            return Err(Error::NonConvergence(format!(
                "every replication failed at axis value {at}"
            )));
        }
        let drlm_count: usize = results.iter().map(|r| r.1 as usize).sum();
        let cond_count: usize = results.iter().map(|r| r.2 as usize).sum();
        let ar_count: usize = results.iter().map(|r| r.3 as usize).sum();
        let p = drlm_count as f64 / used as f64;
        cells.push(CrraCell {
            at: *at,
            c_tilde: spec.c_tilde,
            h0_gamma: h0,
            pseudo_true: pt.gamma_star,
            pseudo_true_at_edge: pt.at_bracket_edge,
            drlm_freq: p,
            drlm_conditional_freq: cond_count as f64 / used as f64,
            ar_freq: ar_count as f64 / used as f64,
            reps_used: used,
            se: mc_se(p, used),
        });
    }
    Ok(CrraResult { cells })
}
