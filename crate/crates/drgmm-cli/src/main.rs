//! Command line front end: data ingestion, test evaluation, confidence
//! sets and the simulation experiments, with machine-readable outputs and
//! reproducibility manifests.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::json;
use sha2::{Digest, Sha256};

use drgmm::confsets::{fm_two_pass, invert_1d, invert_2d, InvertStatistic};
use drgmm::models::{CrraModel, FactorData, FactorModel, IvData, IvModel};
use drgmm::montecarlo::{
    run_crra_experiment, run_jstat_cdf, run_power_curve, run_size_surface, CrraAxis, CrraSpec,
    JstatSpec, PowerSpec, SizeSpec,
};
use drgmm::moments::MomentModel;
use drgmm::solver::{cue_estimate, SolverConfig};
use drgmm::stats::{
    conditional_lr, drlm, gmm_ar, j_statistic, klm, rank_is_statistic, CriticalValuePolicy,
};
use drgmm::Error as CoreError;

#[derive(Parser)]
#[command(name = "drgmm")]
#[command(about = "Double robust inference for continuous updating GMM")]
#[command(version)]
struct Cli {
    /// Worker threads for the simulation commands (0 = rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Default seed; the DRGMM_SEED environment variable overrides the
    /// built-in default when --seed is not given.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Factor,
    Iv,
    Crra,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Chi2,
    Conditional,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StatKind {
    Ar,
    Klm,
    Drlm,
    DrlmEnhanced,
    Lr,
}

impl StatKind {
    fn invert(self) -> InvertStatistic {
        match self {
            StatKind::Ar => InvertStatistic::Ar,
            StatKind::Klm => InvertStatistic::Klm,
            StatKind::Drlm => InvertStatistic::Drlm,
            StatKind::DrlmEnhanced => InvertStatistic::DrlmEnhanced,
            StatKind::Lr => InvertStatistic::Lr,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input CSV (UTF-8, header row, positional columns).
    #[arg(long)]
    data: PathBuf,

    #[arg(long, value_enum)]
    model: ModelKind,

    /// Leading columns to skip (e.g. a date column).
    #[arg(long, default_value_t = 0)]
    skip_columns: usize,

    /// Factor schema: number of asset return columns (N+1 raw, N excess).
    #[arg(long)]
    n_assets: Option<usize>,

    /// Factor schema: number of factor columns.
    #[arg(long)]
    n_factors: Option<usize>,

    /// Returns are already in deviation/excess form.
    #[arg(long, default_value_t = false)]
    excess: bool,

    /// 1-based index of the asset return subtracted from the others
    /// (default: the last).
    #[arg(long)]
    subtract_asset: Option<usize>,

    /// IV schema: number of endogenous regressors.
    #[arg(long)]
    n_endogenous: Option<usize>,

    /// IV schema: number of instruments.
    #[arg(long)]
    n_instruments: Option<usize>,

    /// IV schema: number of included exogenous columns (a constant is
    /// always added).
    #[arg(long, default_value_t = 0)]
    n_exogenous: usize,

    /// CRRA schema: discount factor.
    #[arg(long, default_value_t = 0.95)]
    delta0: f64,

    /// CRRA schema: number of asset return columns.
    #[arg(long)]
    n_returns: Option<usize>,
}

#[derive(Subcommand)]
enum Commands {
    /// Evaluate test statistics at a hypothesized parameter value, with
    /// J and rank diagnostics.
    Test {
        #[command(flatten)]
        data: DataArgs,

        /// Hypothesized parameter value, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        theta0: Option<String>,

        /// Evaluate statistics over a grid "lo:hi:points" instead of a
        /// single point (scalar parameter only); emits a CSV curve.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,

        /// Statistics to evaluate.
        #[arg(long, value_delimiter = ',', value_enum,
              default_values_t = [StatKind::Drlm, StatKind::Klm, StatKind::Ar, StatKind::Lr])]
        stats: Vec<StatKind>,

        #[arg(long, value_enum, default_value_t = PolicyKind::Conditional)]
        policy: PolicyKind,

        #[arg(long, default_value_t = 0.05)]
        alpha: f64,

        /// Output directory for the JSON report, curve CSV and manifest.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },

    /// Invert a test into a confidence set (JSON set + CSV curve for
    /// m = 1, CSV mask for m = 2).
    Confset {
        #[command(flatten)]
        data: DataArgs,

        #[arg(long, value_enum, default_value_t = StatKind::Drlm)]
        statistic: StatKind,

        #[arg(long, value_enum, default_value_t = PolicyKind::Conditional)]
        policy: PolicyKind,

        #[arg(long, default_value_t = 0.05)]
        alpha: f64,

        /// Grid points (per axis for m = 2).
        #[arg(long, default_value_t = 4001)]
        grid_size: usize,

        /// Scale of the atan reparameterization.
        #[arg(long, default_value_t = 10.0)]
        scale: f64,

        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Run a simulation experiment and write CSV/JSON outputs plus a
    /// manifest.
    Simulate {
        #[command(subcommand)]
        experiment: SimulateCommands,
    },

    /// Validate a dataset against a schema and echo its dimensions.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Subcommand)]
enum SimulateCommands {
    /// Null rejection surface over misspecification/identification lengths.
    Size {
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 4.4, 10.0, 30.0, 100.0])]
        mu_sq_axis: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 4.4, 10.0, 30.0, 100.0])]
        d_sq_axis: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the calibrated conditional critical value for DRLM.
        #[arg(long, default_value_t = false)]
        conditional: bool,
        /// Also simulate the power-enhanced DRLM size.
        #[arg(long, default_value_t = false)]
        enhanced: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Power curves when testing lambda = 0 under a drifting pseudo-true
    /// value.
    Power {
        #[arg(long, default_value_t = 25)]
        n: usize,
        /// Squared misspecification length.
        #[arg(long, default_value_t = 4.4)]
        misspec: f64,
        /// Squared identification strengths, one curve each.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 4.4, 25.0])]
        strengths: Vec<f64>,
        /// Drift axis "lo:hi:points".
        #[arg(long, default_value = "-1.5:1.5:31", allow_hyphen_values = true)]
        lambda_axis: String,
        #[arg(long, default_value_t = 5000)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Distribution function of the J statistic under the null drift.
    Jstat {
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long, default_value_t = 4.4)]
        misspec: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 4.4, 100.0])]
        strengths: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Finite-sample CRRA experiment under the shipped calibration.
    Crra {
        /// Misspecification axis "lo:hi:points".
        #[arg(long, default_value = "0:0.2:11")]
        c_axis: String,
        #[arg(long, default_value_t = 1.0)]
        c_tilde: f64,
        /// Hypothesized gamma (default: each cell's pseudo-true value).
        #[arg(long)]
        h0_gamma: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        t_obs: usize,
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}

/// Exit codes: 2 input error, 3 numerical failure, 4 non-convergence.
fn classify_error(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::SingularCovariance { .. }
            | CoreError::NotPositiveDefinite { .. }
            | CoreError::DegenerateTest { .. }
            | CoreError::RankDeficient(_)
            | CoreError::StructureViolation { .. } => 3,
            CoreError::NonConvergence(_) => 4,
            _ => 2,
        };
    }
    2
}

fn default_seed(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| {
            std::env::var("DRGMM_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(20_240_614)
}

fn run(cli: Cli) -> Result<()> {
    let seed = default_seed(cli.seed);
    match cli.command {
        Commands::Test {
            data,
            theta0,
            grid,
            stats,
            policy,
            alpha,
            out_dir,
        } => cmd_test(&data, theta0, grid, &stats, policy, alpha, out_dir),
        Commands::Confset {
            data,
            statistic,
            policy,
            alpha,
            grid_size,
            scale,
            out_dir,
        } => cmd_confset(&data, statistic, policy, alpha, grid_size, scale, &out_dir),
        Commands::Simulate { experiment } => cmd_simulate(experiment, seed),
        Commands::Ingest { data } => cmd_ingest(&data),
    }
}

/// Parsed dataset with its raw column matrix for digesting.
struct Dataset {
    model: Box<dyn MomentModel>,
    description: String,
    fm: Option<drgmm::confsets::FamaMacBeth>,
    first_stage_f: Option<f64>,
}

fn read_csv_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("missing header row")?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let n_cols = headers.len();
    if n_cols == 0 {
        bail!("empty file: no columns in {}", path.display());
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("malformed CSV at data row {}", i + 1))?;
        if record.len() != n_cols {
            bail!(
                "ragged row {}: expected {} columns, found {}",
                i + 1,
                n_cols,
                record.len()
            );
        }
        let mut row = Vec::with_capacity(n_cols);
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                anyhow::anyhow!(
                    "non-numeric cell at row {}, column {} ({:?})",
                    i + 1,
                    j + 1,
                    field
                )
            })?;
            if !value.is_finite() {
                bail!("non-finite cell at row {}, column {}", i + 1, j + 1);
            }
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("empty file: no data rows in {}", path.display());
    }
    let mat = DMatrix::from_fn(rows.len(), n_cols, |i, j| rows[i][j]);
    Ok((headers, mat))
}

fn slice_cols(mat: &DMatrix<f64>, start: usize, count: usize) -> DMatrix<f64> {
    mat.columns(start, count).into_owned()
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let (_headers, mat) = read_csv_matrix(&args.data)?;
    let avail = mat.ncols() - args.skip_columns.min(mat.ncols());
    match args.model {
        ModelKind::Factor => {
            let n_assets = args
                .n_assets
                .context("--n-assets is required for the factor schema")?;
            let n_factors = args
                .n_factors
                .context("--n-factors is required for the factor schema")?;
            if avail != n_assets + n_factors {
                bail!(
                    "schema mismatch: {} data columns, expected {} returns + {} factors",
                    avail,
                    n_assets,
                    n_factors
                );
            }
            let returns = slice_cols(&mat, args.skip_columns, n_assets);
            let factors = slice_cols(&mat, args.skip_columns + n_assets, n_factors);
            let mut data = FactorData::new(returns, factors);
            data.excess = args.excess;
            data.subtract_index = args.subtract_asset.map(|i| i - 1);
            let fm = fm_two_pass(&data)?;
            let model = FactorModel::new(&data)?;
            Ok(Dataset {
                description: format!(
                    "factor model: T = {}, k_f = {}, m = {}",
                    model.n_obs(),
                    model.k_f(),
                    model.m()
                ),
                model: Box::new(model),
                fm: Some(fm),
                first_stage_f: None,
            })
        }
        ModelKind::Iv => {
            let m = args
                .n_endogenous
                .context("--n-endogenous is required for the IV schema")?;
            let k = args
                .n_instruments
                .context("--n-instruments is required for the IV schema")?;
            let p = args.n_exogenous;
            if avail != 1 + m + k + p {
                bail!(
                    "schema mismatch: {} data columns, expected y + {} X + {} Z + {} W",
                    avail,
                    m,
                    k,
                    p
                );
            }
            let y = DVector::from_column_slice(
                slice_cols(&mat, args.skip_columns, 1).as_slice(),
            );
            let x = slice_cols(&mat, args.skip_columns + 1, m);
            let z = slice_cols(&mat, args.skip_columns + 1 + m, k);
            let mut data = IvData::new(y, x, z);
            if p > 0 {
                data.w = Some(slice_cols(&mat, args.skip_columns + 1 + m + k, p));
            }
            let model = IvModel::new(&data)?;
            let f = model.first_stage_f();
            Ok(Dataset {
                description: format!(
                    "IV model: T = {}, k = {}, m = {}, p = {}",
                    model.n_obs(),
                    model.k_f(),
                    model.m(),
                    p
                ),
                model: Box::new(model),
                fm: None,
                first_stage_f: if f.is_nan() { None } else { Some(f) },
            })
        }
        ModelKind::Crra => {
            let n_ret = args
                .n_returns
                .context("--n-returns is required for the CRRA schema")?;
            if avail != 1 + n_ret {
                bail!(
                    "schema mismatch: {} data columns, expected C + {} returns",
                    avail,
                    n_ret
                );
            }
            // Consumption column has T + 1 meaningful entries; returns rows
            // 0..T-1 pair consumption growth t -> t+1 with R_{t+1}.
            let t_rows = mat.nrows();
            let consumption: Vec<f64> = (0..t_rows)
                .map(|i| mat[(i, args.skip_columns)])
                .collect();
            let returns = DMatrix::from_fn(t_rows - 1, n_ret, |i, j| {
                mat[(i + 1, args.skip_columns + 1 + j)]
            });
            let model = CrraModel::new(&consumption, &returns, args.delta0)?;
            Ok(Dataset {
                description: format!(
                    "CRRA model: T = {}, N = {}, delta0 = {}",
                    model.n_obs(),
                    model.k_f(),
                    args.delta0
                ),
                model: Box::new(model),
                fm: None,
                first_stage_f: None,
            })
        }
    }
}

fn parse_theta(raw: &str, m: usize) -> Result<DVector<f64>> {
    let vals: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .context("theta0 must be a comma separated list of numbers")?;
    if vals.len() != m {
        bail!("theta0 has {} entries, the model expects {}", vals.len(), m);
    }
    Ok(DVector::from_vec(vals))
}

fn parse_axis(raw: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        bail!("axis must be lo:hi:points, got {raw:?}");
    }
    let lo: f64 = parts[0].parse().context("axis lo")?;
    let hi: f64 = parts[1].parse().context("axis hi")?;
    let n: usize = parts[2].parse().context("axis points")?;
    if n < 2 || hi <= lo {
        bail!("axis needs hi > lo and at least 2 points");
    }
    Ok((0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

struct Manifest {
    started: Instant,
    value: serde_json::Value,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        let argv: Vec<String> = std::env::args().collect();
        let mut input_entries = Vec::new();
        for p in inputs {
            input_entries.push(json!({
                "path": p.display().to_string(),
                "sha256": file_digest(p)?,
            }));
        }
        Ok(Manifest {
            started: Instant::now(),
            value: json!({
                "command": command,
                "argv": argv,
                "config": config,
                "seed": seed,
                "library_version": env!("CARGO_PKG_VERSION"),
                "inputs": input_entries,
            }),
            outputs: Vec::new(),
        })
    }

    fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn write(mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.value["outputs"] = json!(self.outputs);
        self.value["wall_time_secs"] = json!(self.started.elapsed().as_secs_f64());
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.value)?)?;
        Ok(())
    }
}

fn write_output(dir: &Path, name: &str, content: &str, manifest: &mut Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let body = if name.ends_with(".csv") {
        format!("# manifest: manifest.json\n{content}")
    } else {
        content.to_string()
    };
    std::fs::write(dir.join(name), body)?;
    manifest.record(name);
    Ok(())
}

fn policy_of(kind: PolicyKind, alpha: f64) -> CriticalValuePolicy {
    match kind {
        PolicyKind::Chi2 => CriticalValuePolicy::FixedChi2 { alpha },
        PolicyKind::Conditional => CriticalValuePolicy::ConditionalCalibrated,
    }
}

fn eval_statistic(
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    stat: StatKind,
    policy: &CriticalValuePolicy,
    alpha: f64,
    cue: Option<&DVector<f64>>,
    config: &SolverConfig,
) -> Result<drgmm::TestResult> {
    let eval = model.evaluate(theta)?;
    let res = match stat {
        StatKind::Drlm => drlm(&eval, policy)?,
        StatKind::Klm => klm(&eval, alpha)?,
        StatKind::Ar => gmm_ar(&eval, alpha)?,
        StatKind::Lr => conditional_lr(&eval, alpha)?,
        StatKind::DrlmEnhanced => {
            let enh = drgmm::solver::power_enhanced_test(model, theta, policy, cue, config)?;
            let mut r = enh.at_theta1;
            r.name = "DRLM-enhanced".into();
            r.reject = enh.reject;
            return Ok(r);
        }
    };
    Ok(res)
}

fn cmd_test(
    args: &DataArgs,
    theta0: Option<String>,
    grid: Option<String>,
    stats: &[StatKind],
    policy_kind: PolicyKind,
    alpha: f64,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let dataset = load_dataset(args)?;
    let model = dataset.model.as_ref();
    let policy = policy_of(policy_kind, alpha);
    let config = SolverConfig::default();

    println!("{}", dataset.description);

    // Diagnostics block: CUE, J, rank / first-stage F.
    let sol = cue_estimate(model, &config)?;
    let j = j_statistic(model, &config, alpha)?;
    let cue_str: Vec<String> = sol.cue.iter().map(|v| format!("{v:.4}")).collect();
    println!("CUE: ({})", cue_str.join(", "));
    println!(
        "J = {:.4} on chi2({}), p = {:.4}",
        j.value, j.df, j.p_bound
    );
    let mut diag = json!({
        "cue": sol.cue.as_slice(),
        "j_statistic": { "value": j.value, "df": j.df, "p": j.p_bound },
    });
    if let Some(parts) = model.linear_parts() {
        let rank = rank_is_statistic(parts, model.n_obs(), alpha)?;
        println!(
            "rank-IS = {:.4} on chi2({}), p = {:.4}",
            rank.value, rank.df, rank.p_bound
        );
        diag["rank"] = json!({ "value": rank.value, "df": rank.df, "p": rank.p_bound });
    }
    if let Some(f) = dataset.first_stage_f {
        println!("first-stage F = {f:.4}");
        diag["first_stage_f"] = json!(f);
    }
    if let Some(fm) = &dataset.fm {
        let l: Vec<String> = fm.lambda.iter().map(|v| format!("{v:.4}")).collect();
        let t: Vec<String> = fm.t_stats.iter().map(|v| format!("{v:.4}")).collect();
        println!("FM two-pass: lambda = ({}), t = ({})", l.join(", "), t.join(", "));
        diag["fama_macbeth"] = json!({ "lambda": fm.lambda, "t": fm.t_stats });
    }

    let mut results = Vec::new();
    let mut curve_csv = String::new();
    if let Some(grid_spec) = grid {
        if model.m() != 1 {
            bail!("--grid requires a scalar parameter");
        }
        let axis = parse_axis(&grid_spec)?;
        curve_csv.push_str("theta");
        for s in stats {
            curve_csv.push_str(&format!(",{},{}_cv", s.invert().name(), s.invert().name()));
        }
        curve_csv.push('\n');
        for &x in &axis {
            let theta = DVector::from_vec(vec![x]);
            curve_csv.push_str(&format!("{x}"));
            for &s in stats {
                match eval_statistic(model, &theta, s, &policy, alpha, Some(&sol.cue), &config) {
                    Ok(r) => curve_csv.push_str(&format!(",{},{}", r.value, r.critical_value)),
                    Err(_) => curve_csv.push_str(",nan,nan"),
                }
            }
            curve_csv.push('\n');
        }
        println!("evaluated {} grid points", axis.len());
    } else {
        let theta_raw = theta0.context("provide --theta0 or --grid")?;
        let theta = parse_theta(&theta_raw, model.m())?;
        println!(
            "{:<16} {:>12} {:>6} {:>12} {:>8} {:>10}",
            "statistic", "value", "df", "critical", "reject", "p-bound"
        );
        for &s in stats {
            let r = eval_statistic(model, &theta, s, &policy, alpha, Some(&sol.cue), &config)?;
            println!(
                "{:<16} {:>12.4} {:>6} {:>12.4} {:>8} {:>10.4}",
                r.name, r.value, r.df, r.critical_value, r.reject, r.p_bound
            );
            results.push(r);
        }
    }

    if let Some(dir) = out_dir {
        let mut manifest = Manifest::new(
            "test",
            json!({ "alpha": alpha, "policy": format!("{:?}", policy), "stats": stats.len() }),
            None,
            &[args.data.as_path()],
        )?;
        let report = json!({
            "manifest": "manifest.json",
            "dataset": dataset.description,
            "diagnostics": diag,
            "results": results,
        });
        write_output(&dir, "report.json", &serde_json::to_string_pretty(&report)?, &mut manifest)?;
        if !curve_csv.is_empty() {
            write_output(&dir, "curve.csv", &curve_csv, &mut manifest)?;
        }
        manifest.write(&dir)?;
    }
    Ok(())
}

fn cmd_confset(
    args: &DataArgs,
    statistic: StatKind,
    policy_kind: PolicyKind,
    alpha: f64,
    grid_size: usize,
    scale: f64,
    out_dir: &Path,
) -> Result<()> {
    let dataset = load_dataset(args)?;
    let model = dataset.model.as_ref();
    let policy = policy_of(policy_kind, alpha);
    let mut manifest = Manifest::new(
        "confset",
        json!({
            "statistic": statistic.invert().name(),
            "alpha": alpha,
            "grid_size": grid_size,
            "scale": scale,
        }),
        None,
        &[args.data.as_path()],
    )?;

    match model.m() {
        1 => {
            let config = SolverConfig {
                grid_size,
                atan_scale: scale,
                refine_tol: 1e-8,
            };
            let set = invert_1d(model, statistic.invert(), &policy, &config)?;
            let mut set_json = set.to_json();
            set_json["manifest"] = json!("manifest.json");
            write_output(out_dir, "set.json", &serde_json::to_string_pretty(&set_json)?, &mut manifest)?;
            // Statistic curve for plotting.
            let mut curve = String::from("theta,value,critical_value,accept\n");
            for &psi in &config.psi_grid() {
                let theta = DVector::from_vec(vec![config.theta_of_psi(psi)]);
                match eval_statistic(model, &theta, statistic, &policy, alpha, None, &config) {
                    Ok(r) => curve.push_str(&format!(
                        "{},{},{},{}\n",
                        theta[0], r.value, r.critical_value, !r.reject as u8
                    )),
                    Err(_) => curve.push_str(&format!("{},nan,nan,0\n", theta[0])),
                }
            }
            write_output(out_dir, "curve.csv", &curve, &mut manifest)?;
            let desc: Vec<String> = set
                .intervals
                .iter()
                .map(|&(a, b)| format!("[{a:.4}, {b:.4}]"))
                .collect();
            println!(
                "{} {}% confidence set: {}",
                set.statistic,
                set.level * 100.0,
                if desc.is_empty() {
                    "empty".to_string()
                } else {
                    desc.join(" u ")
                }
            );
        }
        2 => {
            let set = invert_2d(model, statistic.invert(), &policy, grid_size.min(301), scale)?;
            write_output(out_dir, "mask.csv", &set.to_csv(), &mut manifest)?;
            let proj = json!({
                "manifest": "manifest.json",
                "statistic": set.statistic,
                "level": set.level,
                "projection_axis_1": set.projection_1,
                "projection_axis_2": set.projection_2,
            });
            write_output(out_dir, "set.json", &serde_json::to_string_pretty(&proj)?, &mut manifest)?;
            println!(
                "projections: axis 1 {:?}, axis 2 {:?}",
                set.projection_1, set.projection_2
            );
        }
        m => bail!("confidence sets support m = 1 or 2, model has m = {m}"),
    }
    manifest.write(out_dir)?;
    Ok(())
}

fn cmd_simulate(experiment: SimulateCommands, default_seed: u64) -> Result<()> {
    match experiment {
        SimulateCommands::Size {
            n,
            m,
            mu_sq_axis,
            d_sq_axis,
            reps,
            alpha,
            seed,
            conditional,
            enhanced,
            out_dir,
        } => {
            if m != 1 {
                bail!("the size surface is implemented for m = 1");
            }
            let spec = SizeSpec {
                n,
                mu_sq_axis,
                d_sq_axis,
                reps,
                alpha,
                seed: seed.unwrap_or(default_seed),
                conditional,
                include_enhanced: enhanced,
            };
            let mut manifest =
                Manifest::new("simulate size", serde_json::to_value(&spec)?, Some(spec.seed), &[])?;
            let surface = run_size_surface(&spec)?;
            write_output(&out_dir, "surface.csv", &surface.to_csv(), &mut manifest)?;
            manifest.write(&out_dir)?;
            println!(
                "size surface: {} cells x {} reps -> {}",
                surface.mu_sq_axis.len() * surface.d_sq_axis.len(),
                surface.reps,
                out_dir.join("surface.csv").display()
            );
        }
        SimulateCommands::Power {
            n,
            misspec,
            strengths,
            lambda_axis,
            reps,
            alpha,
            seed,
            out_dir,
        } => {
            let spec = PowerSpec {
                n,
                mu_sq: misspec,
                d_sq_list: strengths,
                lambda_axis: parse_axis(&lambda_axis)?,
                reps,
                alpha,
                seed: seed.unwrap_or(default_seed),
            };
            let mut manifest =
                Manifest::new("simulate power", serde_json::to_value(&spec)?, Some(spec.seed), &[])?;
            let curves = run_power_curve(&spec)?;
            write_output(&out_dir, "power.csv", &curves.to_csv(), &mut manifest)?;
            manifest.write(&out_dir)?;
            println!("power curves written to {}", out_dir.join("power.csv").display());
        }
        SimulateCommands::Jstat {
            n,
            misspec,
            strengths,
            reps,
            alpha,
            seed,
            out_dir,
        } => {
            let spec = JstatSpec {
                n,
                mu_sq: misspec,
                d_sq_list: strengths,
                reps,
                alpha,
                seed: seed.unwrap_or(default_seed),
            };
            let mut manifest =
                Manifest::new("simulate jstat", serde_json::to_value(&spec)?, Some(spec.seed), &[])?;
            let res = run_jstat_cdf(&spec)?;
            write_output(&out_dir, "jstat_cdf.csv", &res.to_csv(), &mut manifest)?;
            let summary = json!({
                "manifest": "manifest.json",
                "critical_value": res.critical_value,
                "rejections": res.curves.iter().map(|c| json!({"d_sq": c.d_sq, "rejection": c.rejection, "se": c.se})).collect::<Vec<_>>(),
            });
            write_output(&out_dir, "jstat.json", &serde_json::to_string_pretty(&summary)?, &mut manifest)?;
            manifest.write(&out_dir)?;
            for c in &res.curves {
                println!(
                    "J rejection at cv {:.2} with d_sq {}: {:.4}",
                    res.critical_value, c.d_sq, c.rejection
                );
            }
        }
        SimulateCommands::Crra {
            c_axis,
            c_tilde,
            h0_gamma,
            t_obs,
            reps,
            alpha,
            seed,
            out_dir,
        } => {
            let spec = CrraSpec {
                axis: CrraAxis::Misspecification(parse_axis(&c_axis)?),
                c_tilde,
                h0_gamma,
                t_obs,
                reps,
                alpha,
                seed: seed.unwrap_or(default_seed),
            };
            let mut manifest =
                Manifest::new("simulate crra", serde_json::to_value(&spec)?, Some(spec.seed), &[])?;
            let res = run_crra_experiment(&spec)?;
            write_output(&out_dir, "crra.csv", &res.to_csv(), &mut manifest)?;
            manifest.write(&out_dir)?;
            for c in &res.cells {
                println!(
                    "c = {:.3}: gamma* = {:.2}{} H0 gamma = {:.2}: DRLM = {:.3}, AR = {:.3}",
                    c.at,
                    c.pseudo_true,
                    if c.pseudo_true_at_edge { " (edge)" } else { "" },
                    c.h0_gamma,
                    c.drlm_freq,
                    c.ar_freq
                );
            }
        }
    }
    Ok(())
}

fn cmd_ingest(args: &DataArgs) -> Result<()> {
    let dataset = load_dataset(args)?;
    println!("ok: {}", dataset.description);
    Ok(())
}
