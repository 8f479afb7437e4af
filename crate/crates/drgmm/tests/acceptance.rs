//! Acceptance suite: one test per acceptance criterion, each printing a
//! pass/fail line (run with `cargo test --test acceptance -- --nocapture`
//! to see the lines for passing criteria as well).

use nalgebra::{DMatrix, DVector};

use drgmm::limitdist::{
    maximal_invariant, noncentrality, sample_limit_drlm, svd_structural, drifting_means,
    LimitExperimentParams, LimitPolicy,
};
use drgmm::models::{
    crra_dgp_sample, crra_population, crra_pseudo_true, CrraDgpParams, CrraModel, FactorData,
    FactorModel, IvData, IvModel,
};
use drgmm::montecarlo::{
    run_crra_experiment, run_jstat_cdf, run_power_curve, run_size_surface, CrraAxis, CrraSpec,
    JstatSpec, PowerSpec, SizeSpec,
};
use drgmm::moments::MomentModel;
use drgmm::solver::{
    char_poly, constant_sum, cue_estimate, drlm_derivative, drlm_maximizers, factor_pseudo_true,
    SolverConfig,
};
use drgmm::stats::{conditional_cv, drlm, gmm_ar, j_statistic, klm, rank_is_statistic,
    CriticalValuePolicy};

const SEED: u64 = 20_240_614;

fn mc_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

// ---------------------------------------------------------------------
// Criterion 1: chi-square bound of the DRLM test over the length grid,
// plus the KLM size distortion cell.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_chi2_bound_surface() {
    let axis = vec![0.0, 1.0, 4.4, 10.0, 30.0, 100.0];
    let spec = SizeSpec {
        n: 25,
        mu_sq_axis: axis.clone(),
        d_sq_axis: axis.clone(),
        reps: 10_000,
        alpha: 0.05,
        seed: SEED,
        conditional: false,
        include_enhanced: false,
    };
    let started = std::time::Instant::now();
    let surface = run_size_surface(&spec).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut ok = true;
    for c in surface.cells.iter().filter(|c| c.statistic == "DRLM") {
        let bound = 0.05 + 3.0 * mc_se(0.05, spec.reps);
        if c.frequency > worst.2 {
            worst = (c.mu_sq, c.d_sq, c.frequency);
        }
        if c.frequency > bound {
            ok = false;
        }
    }
    let detail = format!(
        "max DRLM rejection {:.4} at (mu_sq, d_sq) = ({}, {}), bound {:.4}, runtime {:.1}s",
        worst.2,
        worst.0,
        worst.1,
        0.05 + 3.0 * mc_se(0.05, spec.reps),
        elapsed
    );
    report("1 (DRLM chi-square bound)", ok, &detail);
    assert!(ok, "{detail}");
    assert!(elapsed < 300.0, "runtime target exceeded: {elapsed:.1}s");
}

#[test]
fn criterion_1_klm_distortion_cell() {
    // This clause requires KLM rejection at (mu_sq, d_sq) = (10, 0)
    // strictly above 0.10; a 4e5-replication computation puts the true
    // value near 0.097, so it is expected to fail by a small margin.
    let spec = SizeSpec {
        n: 25,
        mu_sq_axis: vec![9.99, 10.0],
        d_sq_axis: vec![0.0, 1.0],
        reps: 10_000,
        alpha: 0.05,
        seed: SEED,
        conditional: false,
        include_enhanced: false,
    };
    let surface = run_size_surface(&spec).unwrap();
    let klm = surface.frequency("KLM", 10.0, 0.0).unwrap();
    let pass = klm > 0.10;
    report(
        "1 (KLM distortion cell)",
        pass,
        &format!("KLM rejection at (10, 0) = {klm:.4}, required > 0.10"),
    );
    assert!(pass, "KLM rejection {klm:.4} not above 0.10");
}

// ---------------------------------------------------------------------
// Criterion 2: conditional critical value anchors and the conditional
// policy at the origin.
// ---------------------------------------------------------------------

#[test]
fn criterion_2_conditional_cv_exact_values() {
    let v0 = conditional_cv(0.0, 0.05).unwrap();
    let v250 = conditional_cv(250.0, 0.05).unwrap();
    let v300 = conditional_cv(300.0, 0.05).unwrap();
    let pass = (v0 - 2.4).abs() < 1e-12 && (v250 - 3.84).abs() < 1e-12 && (v300 - 3.84).abs() < 1e-12;
    report(
        "2 (conditional cv values)",
        pass,
        &format!("f(0) = {v0}, f(250) = {v250}, f(300) = {v300}"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_conditional_policy_origin() {
    // Expected to fail: with the calibrated function bounded below by 2.4
    // and the DRLM's 95% quantile at the origin near 1.84 (N = 25), the
    // stated band [0.03, 0.055] is unattainable; the faithful computation
    // yields about 0.01. See the decisions ledger.
    let params = LimitExperimentParams::from_lengths(25, 0.0, 0.0).unwrap();
    let sample = sample_limit_drlm(&params, 10_000, SEED, LimitPolicy::Conditional, 0.05).unwrap();
    let p = sample.drlm_frequency();
    let pass = (0.03..=0.055).contains(&p);
    report(
        "2 (conditional policy at the origin)",
        pass,
        &format!("rejection {p:.4}, required in [0.03, 0.055]"),
    );
    assert!(pass, "origin rejection {p:.4} outside [0.03, 0.055]");
}

// ---------------------------------------------------------------------
// Criterion 3: power anchors at the null point of the drifting
// experiment.
// ---------------------------------------------------------------------

fn power_at_null(n: usize, mu_sq: f64, d_sq_list: Vec<f64>, reps: usize) -> drgmm::montecarlo::PowerCurves {
    let spec = PowerSpec {
        n,
        mu_sq,
        d_sq_list,
        lambda_axis: vec![0.0],
        reps,
        alpha: 0.05,
        seed: SEED,
    };
    run_power_curve(&spec).unwrap()
}

#[test]
fn criterion_3_power_anchors_weak_misspecification() {
    // mu'mu = 4.4; identification strengths: none (0), equal (4.4) and
    // the strong setting matching the reported anchor (25).
    let reps = 5000;
    let curves = power_at_null(25, 4.4, vec![0.0, 4.4, 25.0], reps);
    let tol = |p: f64| 0.02 + 3.0 * mc_se(p, reps);
    let mut ok = true;
    let mut notes = Vec::new();
    for (d_sq, target) in [(0.0, 0.15), (4.4, 0.13), (25.0, 0.09)] {
        let got = curves.frequency("LR", d_sq, 0.0).unwrap();
        let fine = (got - target).abs() <= tol(target);
        ok &= fine;
        notes.push(format!("LR@{d_sq}: {got:.3} (target {target})"));
    }
    for (d_sq, target) in [(0.0, 0.07), (25.0, 0.05)] {
        let got = curves.frequency("KLM", d_sq, 0.0).unwrap();
        let fine = (got - target).abs() <= tol(target);
        ok &= fine;
        notes.push(format!("KLM@{d_sq}: {got:.3} (target {target})"));
    }
    for d_sq in [0.0, 4.4, 25.0] {
        let got = curves.frequency("AR", d_sq, 0.0).unwrap();
        let fine = (got - 0.15).abs() <= tol(0.15);
        ok &= fine;
        notes.push(format!("AR@{d_sq}: {got:.3} (target 0.15)"));
        let dr = curves.frequency("DRLM", d_sq, 0.0).unwrap();
        let dr_fine = dr <= 0.05 + 3.0 * mc_se(0.05, reps);
        ok &= dr_fine;
        notes.push(format!("DRLM@{d_sq}: {dr:.3} (<= 0.05)"));
    }
    report("3 (power anchors, mu'mu = 4.4)", ok, &notes.join("; "));
    assert!(ok, "{}", notes.join("; "));
}

#[test]
fn criterion_3_power_anchors_mild_misspecification() {
    let reps = 5000;
    let curves = power_at_null(25, 10.0, vec![0.0, 10.0, 100.0], reps);
    let tol = |p: f64| 0.02 + 3.0 * mc_se(p, reps);
    let mut ok = true;
    let mut notes = Vec::new();
    for (d_sq, target) in [(0.0, 0.30), (10.0, 0.27), (100.0, 0.08)] {
        let got = curves.frequency("LR", d_sq, 0.0).unwrap();
        ok &= (got - target).abs() <= tol(target);
        notes.push(format!("LR@{d_sq}: {got:.3} (target {target})"));
    }
    for (d_sq, target) in [(0.0, 0.10), (100.0, 0.05)] {
        let got = curves.frequency("KLM", d_sq, 0.0).unwrap();
        ok &= (got - target).abs() <= tol(target);
        notes.push(format!("KLM@{d_sq}: {got:.3} (target {target})"));
    }
    for d_sq in [0.0, 10.0, 100.0] {
        let got = curves.frequency("AR", d_sq, 0.0).unwrap();
        ok &= (got - 0.36).abs() <= tol(0.36);
        notes.push(format!("AR@{d_sq}: {got:.3} (target 0.36)"));
    }
    report("3 (power anchors, mu'mu = 10)", ok, &notes.join("; "));
    assert!(ok, "{}", notes.join("; "));
}

// ---------------------------------------------------------------------
// Criterion 4: J-statistic rejection anchors.
// ---------------------------------------------------------------------

#[test]
fn criterion_4_jstat_anchors() {
    let reps = 10_000;
    let configs: [(usize, f64, Vec<f64>, Vec<f64>); 3] = [
        (25, 4.4, vec![0.0, 4.4, 100.0], vec![0.0, 0.0, 0.15]),
        (25, 10.0, vec![0.0, 10.0, 100.0], vec![0.0, 0.07, 0.33]),
        (5, 2.5, vec![0.0, 2.5, 100.0], vec![0.0, 0.025, 0.20]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (n, mu_sq, d_list, targets) in configs {
        let spec = JstatSpec {
            n,
            mu_sq,
            d_sq_list: d_list.clone(),
            reps,
            alpha: 0.05,
            seed: SEED,
        };
        let res = run_jstat_cdf(&spec).unwrap();
        for (curve, &target) in res.curves.iter().zip(targets.iter()) {
            let tol = 0.02 + 3.0 * mc_se(target.max(0.005), reps);
            let fine = (curve.rejection - target).abs() <= tol;
            ok &= fine;
            notes.push(format!(
                "N={n} mu2={mu_sq} d2={}: {:.3} (target {target})",
                curve.d_sq, curve.rejection
            ));
        }
    }
    report("4 (J-statistic anchors)", ok, &notes.join("; "));
    assert!(ok, "{}", notes.join("; "));
}

// ---------------------------------------------------------------------
// Criterion 5: CRRA pipeline under the shipped calibration.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_crra_pipeline() {
    let clean = crra_pseudo_true(&CrraDgpParams::shipped(0.0, 1.0)).unwrap();
    let shifted = crra_pseudo_true(&CrraDgpParams::shipped(0.1, 1.0)).unwrap();
    let anchors_ok = (clean.gamma_star - 15.0).abs() < 1e-5
        && clean.min_objective < 1e-12
        && (shifted.gamma_star - 24.0).abs() <= 0.5;

    // Misspecified-DGP rejection frequencies at the shipped
    // configuration: T = 2000, 2000 replications, H0: gamma = gamma*(c = 0.1).
    let spec = CrraSpec {
        axis: CrraAxis::Misspecification(vec![0.1]),
        c_tilde: 1.0,
        h0_gamma: Some(shifted.gamma_star),
        t_obs: 2000,
        reps: 2000,
        alpha: 0.05,
        seed: SEED,
    };
    let res = run_crra_experiment(&spec).unwrap();
    let cell = &res.cells[0];
    let drlm_ok = (cell.drlm_freq - 0.05).abs() <= 0.02;
    let ar_ok = cell.ar_freq > 0.08;
    let ok = anchors_ok && drlm_ok && ar_ok;
    let detail = format!(
        "gamma*(0) = {:.6}, gamma*(0.1) = {:.3}; DRLM rejection {:.3} (0.05 +- 0.02), AR rejection {:.3} (> 0.08); calibration-sensitive values use the shipped calibration",
        clean.gamma_star, shifted.gamma_star, cell.drlm_freq, cell.ar_freq
    );
    report("5 (CRRA pipeline)", ok, &detail);
    assert!(ok, "{detail}");
}

// ---------------------------------------------------------------------
// Criterion 6: population-formula oracles for the CRRA moments.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_crra_population_oracles() {
    let params = CrraDgpParams::shipped(0.05, 1.0);
    let gamma0 = params.gamma0;

    // Exact zero under the correct-specification restriction.
    let clean = CrraDgpParams::shipped(0.0, 1.0);
    let (mu_clean, _) = crra_population(&clean, gamma0);
    let exact_zero = mu_clean.amax() < 1e-15;

    // 10^6-draw Monte Carlo moments of f_t(gamma) against the closed
    // forms, within 4 MC standard errors componentwise.
    let t = 1_000_000usize;
    let gamma = 20.0;
    let (mu_f, v_ff) = crra_population(&params, gamma);
    let (cons, rets) = crra_dgp_sample(&params, t, SEED).unwrap();
    let model = CrraModel::new(&cons, &rets, params.delta0).unwrap();
    let n = params.n_assets();
    let theta = DVector::from_vec(vec![gamma]);
    let mut sum = DVector::zeros(n);
    let mut sum_sq = DMatrix::zeros(n, n);
    for s in 0..t {
        let f = model.moment(&theta, s);
        sum += &f;
        sum_sq += &f * f.transpose();
    }
    let mean = &sum / t as f64;
    let cov = &sum_sq / t as f64 - &mean * mean.transpose();

    let mut ok_mean = true;
    for i in 0..n {
        let se = (v_ff[(i, i)] / t as f64).sqrt();
        if (mean[i] - mu_f[i]).abs() > 4.0 * se {
            ok_mean = false;
        }
    }
    let mut ok_cov = true;
    for i in 0..n {
        for j in 0..n {
            // Delta-method scale for a covariance entry of log-normals.
            let se = ((v_ff[(i, i)] * v_ff[(j, j)] + v_ff[(i, j)].powi(2)) / t as f64)
                .sqrt()
                * 3.0;
            if (cov[(i, j)] - v_ff[(i, j)]).abs() > 4.0 * se {
                ok_cov = false;
            }
        }
    }
    let ok = exact_zero && ok_mean && ok_cov;
    report(
        "6 (CRRA population oracles)",
        ok,
        &format!(
            "mu_f(gamma0) max |.| = {:.2e}; mean within 4 se: {ok_mean}; covariance within 4 se: {ok_cov}",
            mu_clean.amax()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criterion 7: deterministic algebraic invariant suite.
// ---------------------------------------------------------------------

fn demeaned_factor_data(t: usize, n_assets: usize, m: usize, lambda: f64, seed: u64) -> FactorData {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut factors = DMatrix::from_fn(t, m, |_, _| normal());
    let fmean = factors.row_mean();
    for mut row in factors.row_iter_mut() {
        row -= &fmean;
    }
    let beta = DMatrix::from_fn(n_assets, m, |i, j| 0.4 + 0.12 * i as f64 + 0.05 * j as f64);
    let mut returns = DMatrix::zeros(t, n_assets);
    for s in 0..t {
        for a in 0..n_assets {
            let mut v = beta.row(a).sum() * lambda / m as f64;
            for j in 0..m {
                v += beta[(a, j)] * factors[(s, j)];
            }
            returns[(s, a)] = v + 0.6 * normal();
        }
    }
    FactorData::new(returns, factors)
}

#[test]
fn criterion_7_algebraic_invariants() {
    use rand::Rng;
    use rand::SeedableRng;
    let started = std::time::Instant::now();
    let config = SolverConfig::default();
    let policy = CriticalValuePolicy::FixedChi2 { alpha: 0.05 };
    let mut notes = Vec::new();

    // (a) DRLM <= KLM pointwise.
    let mut dominance = true;
    for seed in 0..25u64 {
        let data = demeaned_factor_data(150, 6, 1, 0.4, seed);
        let model = FactorModel::new(&data).unwrap();
        for lam in [-1.0, 0.0, 0.7, 3.0] {
            let eval = model.evaluate(&DVector::from_vec(vec![lam])).unwrap();
            let d = drlm(&eval, &policy).unwrap().value;
            let k = klm(&eval, 0.05).unwrap().value;
            dominance &= d <= k + 1e-9 * (1.0 + k);
        }
    }
    notes.push(format!("DRLM<=KLM: {dominance}"));

    // (b) DRLM = 0 at stationary points.
    let data = demeaned_factor_data(250, 6, 1, 0.4, 101);
    let model = FactorModel::new(&data).unwrap();
    let sol = cue_estimate(&model, &config).unwrap();
    let mut stationary_zero = drlm(&model.evaluate(&sol.cue).unwrap(), &policy)
        .unwrap()
        .value
        < 1e-6;
    for p in &sol.other_points {
        let v = drlm(
            &model.evaluate(&DVector::from_vec(p.theta.clone())).unwrap(),
            &policy,
        )
        .unwrap()
        .value;
        stationary_zero &= v < 1e-6;
    }
    notes.push(format!("DRLM=0 at stationary points: {stationary_zero}"));

    // (c) the data-set constant sum (the solver errors beyond 1e-8 relative
    // spread), on both linear models.
    let d_factor = constant_sum(&model, &config).is_ok();
    let iv_data = {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let t = 300;
        let z = DMatrix::from_fn(t, 4, |_, _| normal());
        let mut x = DMatrix::zeros(t, 1);
        let mut y = DVector::zeros(t);
        for i in 0..t {
            let v = normal();
            x[(i, 0)] = 0.4 * (z[(i, 0)] + z[(i, 1)]) + v;
            y[i] = 0.6 * x[(i, 0)] + 0.5 * v + normal();
        }
        IvData::new(y, x, z)
    };
    let iv_model = IvModel::new(&iv_data).unwrap();
    let d_iv = constant_sum(&iv_model, &config).is_ok();
    notes.push(format!("constant sum (factor, IV): ({d_factor}, {d_iv})"));

    // (d) Analytic DRLM derivative vs central finite differences.
    let mut deriv_ok = true;
    for lam in [-0.6, 0.2, 1.1] {
        let eval = model.evaluate(&DVector::from_vec(vec![lam])).unwrap();
        let analytic = drlm_derivative(&model, &eval).unwrap();
        let h = 1e-5;
        let up = drlm(&model.evaluate(&DVector::from_vec(vec![lam + h])).unwrap(), &policy)
            .unwrap()
            .value;
        let dn = drlm(&model.evaluate(&DVector::from_vec(vec![lam - h])).unwrap(), &policy)
            .unwrap()
            .value;
        let fd = (up - dn) / (2.0 * h);
        deriv_ok &= (analytic - fd).abs() <= 1e-3 * (1.0 + fd.abs());
    }
    notes.push(format!("derivative vs FD: {deriv_ok}"));

    // (e) char_poly smallest root vs dense grid minimum of the population
    // objective.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut charpoly_ok = true;
    for _ in 0..5 {
        let n = 6;
        let mu = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.3);
        let beta = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 0.8);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let omega = &g * g.transpose() + DMatrix::identity(n, n);
        let q = DMatrix::identity(1, 1) * (0.5 + rng.random::<f64>());
        let sol = char_poly(&mu, &beta, &omega, &q).unwrap();
        let omega_pd = drgmm::linalg::SymPd::new(&omega, false).unwrap();
        let mut grid_min = f64::INFINITY;
        for i in 0..100_001 {
            let psi = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / 100_000.0;
            let lam = 10.0 * psi.tan();
            if !lam.is_finite() {
                continue;
            }
            let resid = &mu - &beta * lam;
            let val = omega_pd.inv_quad(&resid) / (1.0 + lam * lam / q[(0, 0)]);
            grid_min = grid_min.min(val);
        }
        charpoly_ok &= (sol.min_objective - grid_min).abs() <= 1e-6 * (1.0 + grid_min);
    }
    notes.push(format!("char_poly vs grid: {charpoly_ok}"));

    // (f) IS >= minimal objective on 100 random instances.
    let mut is_ok = true;
    for _ in 0..100 {
        let n = 5;
        let m = 1 + (rng.random::<u32>() % 2) as usize;
        let mu = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let beta = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let omega = &g * g.transpose() + DMatrix::identity(n, n) * 0.4;
        let gq = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
        let q = &gq * gq.transpose() + DMatrix::identity(m, m) * 0.6;
        let pt = factor_pseudo_true(&mu, &beta, &omega, &q).unwrap();
        is_ok &= pt.is_measure >= pt.min_objective - 1e-10;
    }
    notes.push(format!("IS >= min objective: {is_ok}"));

    // (g) structural decomposition reconstruction and orthogonality below 1e-8.
    let mut svd_ok = true;
    for seed in [31u64, 32, 33, 34] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 7;
        let mu = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let beta = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let omega = &g * g.transpose() + DMatrix::identity(n, n) * 0.7;
        let q = DMatrix::identity(1, 1) * 1.2;
        let sd = svd_structural(&mu, &beta, &omega, &q, 1.0).unwrap();
        if sd.lambda_star[0].is_infinite() || sd.degenerate {
            continue;
        }
        let cross = (sd.d_perp.transpose() * &sd.d_star).amax();
        let gram = (sd.d_perp.transpose() * &omega * &sd.d_perp - DMatrix::identity(n - 1, n - 1))
            .amax();
        svd_ok &= cross < 1e-8 && gram < 1e-8;

        // Reconstruction.
        let omega_pd = drgmm::linalg::SymPd::new(&omega, false).unwrap();
        let q_s = q[(0, 0)];
        let lam = sd.lambda_star[0];
        let mut stacked = DMatrix::zeros(n, 2);
        stacked.set_column(0, &mu);
        stacked.set_column(1, &beta.column(0).into_owned());
        let mut right = DMatrix::identity(2, 2);
        right[(1, 1)] = q_s.sqrt();
        let lhs = omega_pd.inv_sqrt() * &stacked * &right;
        let lam_i = DMatrix::from_row_slice(1, 2, &[lam, 1.0]);
        let term1 = -(omega_pd.inv_sqrt() * &sd.d_star * &lam_i * &right);
        let norm = (1.0 + lam * lam / q_s).sqrt();
        let lam_perp = DMatrix::from_row_slice(1, 2, &[1.0 / norm, -lam / norm]);
        let mut right_inv = DMatrix::identity(2, 2);
        right_inv[(1, 1)] = 1.0 / q_s.sqrt();
        let delta_mat = DMatrix::from_column_slice(n - 1, 1, sd.delta.as_slice());
        let term2 = omega_pd.sqrt() * &sd.d_perp * delta_mat * lam_perp * right_inv;
        svd_ok &= (lhs - term1 - term2).amax() < 1e-8;
    }
    notes.push(format!("structural reconstruction: {svd_ok}"));

    // (h) maximizer condition: AR = d/2 at the analytic
    // maximizers.
    let d = constant_sum(&model, &config).unwrap();
    let maxima = drlm_maximizers(model.linear_parts().unwrap(), model.n_obs(), d).unwrap();
    let mut max_ok = !maxima.is_empty();
    for lam in &maxima {
        let eval = model.evaluate(&DVector::from_vec(vec![*lam])).unwrap();
        let ar = eval.cue_objective_scaled();
        max_ok &= (ar - d / 2.0).abs() <= 1e-8 * (1.0 + d);
    }
    notes.push(format!("maximizer AR = d/2: {max_ok}"));

    let elapsed = started.elapsed().as_secs_f64();
    let ok = dominance
        && stationary_zero
        && d_factor
        && d_iv
        && deriv_ok
        && charpoly_ok
        && is_ok
        && svd_ok
        && max_ok
        && elapsed < 60.0;
    report(
        "7 (algebraic invariants)",
        ok,
        &format!("{}; runtime {elapsed:.1}s", notes.join("; ")),
    );
    assert!(ok, "{}", notes.join("; "));
}

// ---------------------------------------------------------------------
// Criterion 8: empirical golden numbers, conditional on user-supplied
// datasets (DRGMM_DATA_DIR); skipped otherwise.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_empirical_golden_numbers() {
    let dir = match std::env::var("DRGMM_DATA_DIR") {
        Ok(d) => std::path::PathBuf::from(d),
        Err(_) => {
            report(
                "8 (empirical golden numbers)",
                true,
                "SKIPPED: set DRGMM_DATA_DIR to a directory with adrian.csv / he.csv / rm_smb.csv / card.csv to enable",
            );
            return;
        }
    };
    let mut ok = true;
    let mut notes = Vec::new();
    let config = SolverConfig::default();

    // Helper: load a factor CSV laid out as R_1..R_{N+1}, F_1..F_m.
    let load_factor = |name: &str, n_assets: usize, m: usize| -> Option<FactorModel> {
        let path = dir.join(name);
        if !path.exists() {
            return None;
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(&path).ok()?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.ok()?;
            rows.push(rec.iter().map(|s| s.trim().parse().unwrap()).collect());
        }
        let t = rows.len();
        let returns = DMatrix::from_fn(t, n_assets, |i, j| rows[i][j]);
        let factors = DMatrix::from_fn(t, m, |i, j| rows[i][n_assets + j]);
        FactorModel::new(&FactorData::new(returns, factors)).ok()
    };

    if let Some(model) = load_factor("adrian.csv", 25, 1) {
        let sol = cue_estimate(&model, &config).unwrap();
        let j = j_statistic(&model, &config, 0.05).unwrap();
        let rank = rank_is_statistic(model.linear_parts().unwrap(), model.n_obs(), 0.05).unwrap();
        let pass = (sol.cue[0] - 51.77).abs() < 0.5
            && (j.value - 28.42).abs() < 0.5
            && (rank.value - 31.97).abs() < 0.5;
        ok &= pass;
        notes.push(format!(
            "Adrian: CUE {:.2} (51.77), J {:.2} (28.42), rank {:.2} (31.97)",
            sol.cue[0], j.value, rank.value
        ));
    } else {
        notes.push("adrian.csv not found".into());
    }

    if let Some(model) = load_factor("he.csv", 25, 2) {
        let sol = cue_estimate(&model, &config).unwrap();
        let j = j_statistic(&model, &config, 0.05).unwrap();
        let rank = rank_is_statistic(model.linear_parts().unwrap(), model.n_obs(), 0.05).unwrap();
        let pass = (sol.cue[0] - 23.22).abs() < 0.5
            && (sol.cue[1] - 94.02).abs() < 0.5
            && (j.value - 35.32).abs() < 0.5
            && (rank.value - 35.88).abs() < 0.5;
        ok &= pass;
        notes.push(format!(
            "He: CUE ({:.2}, {:.2}) ((23.22, 94.02)), J {:.2} (35.32), rank {:.2} (35.88)",
            sol.cue[0], sol.cue[1], j.value, rank.value
        ));
    } else {
        notes.push("he.csv not found".into());
    }

    if let Some(model) = load_factor("rm_smb.csv", 25, 2) {
        let j = j_statistic(&model, &config, 0.05).unwrap();
        let rank = rank_is_statistic(model.linear_parts().unwrap(), model.n_obs(), 0.05).unwrap();
        let pass = (j.value - 59.34).abs() < 0.5 && (rank.value - 128.35).abs() < 0.5;
        ok &= pass;
        notes.push(format!(
            "Rm&SMB: J {:.2} (59.34), rank {:.2} (128.35)",
            j.value, rank.value
        ));
    } else {
        notes.push("rm_smb.csv not found".into());
    }

    // Card: y, X, Z_1..Z_3, W_1..W_p.
    let card_path = dir.join("card.csv");
    if card_path.exists() {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&card_path)
            .unwrap();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            rows.push(rec.iter().map(|s| s.trim().parse().unwrap()).collect());
        }
        let t = rows.len();
        let cols = rows[0].len();
        let p = cols - 1 - 1 - 3;
        let y = DVector::from_fn(t, |i, _| rows[i][0]);
        let x = DMatrix::from_fn(t, 1, |i, _| rows[i][1]);
        let z = DMatrix::from_fn(t, 3, |i, j| rows[i][2 + j]);
        let mut data = IvData::new(y, x, z);
        if p > 0 {
            data.w = Some(DMatrix::from_fn(t, p, |i, j| rows[i][5 + j]));
        }
        let model = IvModel::new(&data).unwrap();
        let j = j_statistic(&model, &config, 0.05).unwrap();
        let rank = rank_is_statistic(model.linear_parts().unwrap(), model.n_obs(), 0.05).unwrap();
        let pass = (j.value - 2.99).abs() < 0.5
            && (model.first_stage_f() - 7.01).abs() < 0.5
            && (rank.value - 21.03).abs() < 0.5;
        ok &= pass;
        notes.push(format!(
            "Card: J {:.2} (2.99), F {:.2} (7.01), IS {:.2} (21.03)",
            j.value,
            model.first_stage_f(),
            rank.value
        ));
    } else {
        notes.push("card.csv not found".into());
    }

    report("8 (empirical golden numbers)", ok, &notes.join("; "));
    assert!(ok, "{}", notes.join("; "));
}

// ---------------------------------------------------------------------
// Supplementary acceptance checks tied to spec invariants that sit across
// modules: the single-code-path claim for the drifting sampler and the
// maximal-invariant identities.
// ---------------------------------------------------------------------

#[test]
fn supplementary_drift_sampler_single_code_path() {
    // Zero-drift means reproduce the null sampler bit for bit.
    let n = 12;
    let mut mu = DVector::zeros(n);
    mu[0] = 4.4f64.sqrt();
    let mut d = DVector::zeros(n);
    d[1] = 3.0;
    let (mf, md) = drifting_means(0.0, &mu, &d);
    let null_params = LimitExperimentParams::new(mu.clone(), DMatrix::from_column_slice(n, 1, d.as_slice())).unwrap();
    let drift_params =
        LimitExperimentParams::drifted(mf, DMatrix::from_column_slice(n, 1, md.as_slice()));
    let a = sample_limit_drlm(&null_params, 2000, SEED, LimitPolicy::FixedChi2, 0.05).unwrap();
    let b = sample_limit_drlm(&drift_params, 2000, SEED, LimitPolicy::FixedChi2, 0.05).unwrap();
    let pass = a.drlm_values == b.drlm_values;
    report(
        "supplementary (single drift code path)",
        pass,
        "zero-drift means reproduce the null sampler bitwise",
    );
    assert!(pass);
}

#[test]
fn supplementary_enhanced_size_where_minimizer_valid() {
    // The power improvement must not distort size when the hypothesized
    // value is the population minimizer, which requires identification
    // strictly stronger than the misspecification (at equality the
    // population objective is flat and no unique minimizer exists).
    let spec = SizeSpec {
        n: 25,
        mu_sq_axis: vec![0.0, 4.4, 30.0],
        d_sq_axis: vec![4.4, 30.0, 100.0],
        reps: 5000,
        alpha: 0.05,
        seed: SEED,
        conditional: true,
        include_enhanced: true,
    };
    let surface = run_size_surface(&spec).unwrap();
    let bound = 0.05 + 3.0 * mc_se(0.05, spec.reps);
    let mut ok = true;
    let mut worst = 0.0f64;
    for c in surface
        .cells
        .iter()
        .filter(|c| c.statistic == "DRLM-enhanced" && (c.d_sq > c.mu_sq || c.mu_sq == 0.0))
    {
        worst = worst.max(c.frequency);
        ok &= c.frequency <= bound;
    }
    report(
        "supplementary (enhanced size, valid region)",
        ok,
        &format!("max enhanced rejection {worst:.4}, bound {bound:.4}"),
    );
    assert!(ok, "enhanced size {worst:.4} exceeds {bound:.4}");
}

#[test]
fn supplementary_maximal_invariant_identities() {
    let data = demeaned_factor_data(300, 6, 1, 0.5, 77);
    let model = FactorModel::new(&data).unwrap();
    let policy = CriticalValuePolicy::FixedChi2 { alpha: 0.05 };
    let mut ok = true;
    for lam in [-0.5, 0.0, 0.8] {
        let eval = model.evaluate(&DVector::from_vec(vec![lam])).unwrap();
        let (s_pp, s_lp, s_ll) = maximal_invariant(&eval).unwrap();
        let ar = gmm_ar(&eval, 0.05).unwrap().value;
        ok &= (s_pp - ar).abs() < 1e-10 * (1.0 + ar);
        let d = drlm(&eval, &policy).unwrap().value;
        ok &= (s_lp * s_lp / (s_pp + s_ll) - d).abs() < 1e-10 * (1.0 + d);
        let k = klm(&eval, 0.05).unwrap().value;
        ok &= (s_lp * s_lp / s_ll - k).abs() < 1e-10 * (1.0 + k);
    }
    // Cross-module: delta'delta from the structural SVD equals the
    // smallest characteristic polynomial root.
    let q = model.q_ff().clone();
    let sd = svd_structural(model.r_bar(), model.beta_hat(), model.omega(), &q, 1.0).unwrap();
    let cp = char_poly(model.r_bar(), model.beta_hat(), model.omega(), &q).unwrap();
    ok &= (sd.delta.dot(&sd.delta) - cp.roots[0]).abs() < 1e-8 * (1.0 + cp.roots[0]);

    // Noncentrality equals the direct mean cross product at the null.
    let lam_star = sd.lambda_star[0];
    if lam_star.is_finite() {
        let nc = noncentrality(
            lam_star,
            lam_star,
            &sd.d_star.column(0).into_owned(),
            &sd.delta,
            q[(0, 0)],
            model.omega(),
        )
        .unwrap();
        ok &= nc[(0, 1)].abs() < 1e-8 * (1.0 + nc[(1, 1)].abs());
    }
    report(
        "supplementary (maximal invariant identities)",
        ok,
        "S_pp = AR, DRLM and KLM quadratic identities, delta'delta = smallest root",
    );
    assert!(ok);
}
