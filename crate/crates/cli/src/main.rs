use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use pgem::benchmark::{holdout_paths, run_benchmark, BenchConfig};
use pgem::em::{fit_em, fit_qnem, Algorithm, FitReport};
use pgem::io::{fmt_float, ingest_csv, write_dataset, write_meta_comment, Ingested};
use pgem::model::{sigmoid, Dataset, GaussianPrior};
use pgem::multinomial::{class_probs, fit_ecm, fit_partial_irls, CoefBlock, MultiDataset, MultiFit};
use pgem::online::{fit_online_em, fit_sgd, LearnRate, OnlineConfig};
use pgem::report::ReportJson;
use pgem::simulate::{holdout_split, simulate, Design, Family, SimOverrides};
use pgem::sparse::{
    default_grid, fit_bridge_em, fit_irls_cd, fit_lasso_em, intercept_columns, lambda_max, solution_path, LassoSolver,
    PathMethod, PathOptions, PenaltySpec,
};
use pgem::vb::fit_vb;
use pgem::{Error, Result};

#[derive(Parser)]
#[command(name = "pgem", version, about = "Polya-Gamma EM and friends for logistic-family regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Fit one model and write a JSON report.
    Fit(FitArgs),
    /// Fit a penalized model along a λ grid.
    Path(PathArgs),
    /// Compare estimators on held-out data.
    Benchmark(BenchArgs),
    /// Predict probabilities from a saved report.
    Predict(PredictArgs),
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

fn parse_design(s: &str) -> std::result::Result<Design, String> {
    s.parse::<Design>().map_err(|e| e.to_string())
}

#[derive(Args, Serialize, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 10_000)]
    max_iter: usize,
    /// Isotropic Gaussian prior precision for the Bayesian fits.
    #[arg(long = "prior-precision", default_value_t = 1e-5)]
    prior_precision: f64,
}

#[derive(ValueEnum, Clone, Copy, Serialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
enum PenaltyKind {
    None,
    Lasso,
    Bridge,
}

#[derive(Args, Serialize, Clone)]
struct PenaltyArgs {
    #[arg(long, value_enum)]
    penalty: Option<PenaltyKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Leave all-ones columns unpenalized.
    #[arg(long = "exempt-intercept")]
    exempt_intercept: bool,
}

#[derive(Args, Serialize, Clone)]
struct OnlineArgs {
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long = "rate-c", default_value_t = 0.52)]
    rate_c: f64,
    #[arg(long = "rate-t0", default_value_t = 0.0)]
    rate_t0: f64,
    #[arg(long = "pr-burn")]
    pr_burn: Option<usize>,
}

impl OnlineArgs {
    fn rate(&self) -> Result<LearnRate> {
        LearnRate::new(self.rate_c, self.rate_t0)
    }

    fn online(&self, d: usize, seed: u64) -> Result<OnlineConfig> {
        let base = OnlineConfig::for_dim(d);
        Ok(OnlineConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            passes: self.passes.unwrap_or(base.passes),
            rate: self.rate()?,
            pr_burn: self.pr_burn,
            seed,
            prior_free: false,
        })
    }
}

#[derive(Args, Serialize, Clone)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_design, default_value = "small-dense")]
    design: Design,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    /// Binomial trials per row.
    #[arg(long, conflicts_with = "nb_r")]
    trials: Option<u32>,
    /// Negative-binomial overdispersion; switches the response family.
    #[arg(long = "nb-r")]
    nb_r: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON file for the true coefficients.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct FitArgs {
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Algorithm,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[command(flatten)]
    online: OnlineArgs,
}

#[derive(Args, Serialize, Clone)]
struct PathArgs {
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Algorithm,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of log-spaced points, or a comma-separated decreasing list.
    #[arg(long, default_value = "100")]
    grid: String,
    #[arg(long = "lambda-min-ratio", default_value_t = 1e-3)]
    lambda_min_ratio: f64,
    /// Fit every grid point from zero instead of the previous solution.
    #[arg(long)]
    cold: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    penalty: PenaltyArgs,
}

#[derive(Args, Serialize, Clone)]
struct BenchArgs {
    /// Comma-separated arms.
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm, default_value = "em,online-em,sgd")]
    algorithm: Vec<Algorithm>,
    /// Input CSV; when absent the data come from `--design`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_design, default_value = "collinear")]
    design: Design,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    /// Output prefix: `<out>.trace.csv`, `<out>.summary.json`, `<out>.holdout.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "holdout-frac", default_value_t = 0.2)]
    holdout_frac: f64,
    /// Random splits for the penalized-path misclassification comparison.
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    #[arg(long = "sgd-passes", default_value_t = 50)]
    sgd_passes: usize,
    /// Give SGD the online arm's wall-clock budget (not bit-reproducible).
    #[arg(long = "match-wall-clock")]
    match_wall_clock: bool,
    #[arg(long, default_value = "100")]
    grid: String,
    #[arg(long = "lambda-min-ratio", default_value_t = 1e-3)]
    lambda_min_ratio: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    online: OnlineArgs,
}

#[derive(Args, Serialize, Clone)]
struct PredictArgs {
    /// JSON report written by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    pgem::io::create(path)
}

fn meta<C: Serialize>(command: &str, seed: Option<u64>, config: &C) -> serde_json::Value {
    serde_json::json!({ "command": command, "seed": seed, "config": config })
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let family = match (args.trials, args.nb_r) {
        (_, Some(r)) => Some(Family::NegativeBinomial { r }),
        (Some(trials), None) => Some(Family::Binomial { trials }),
        (None, None) => None,
    };
    let overrides = SimOverrides { n: args.n, d: args.d, factors: args.factors, family };
    let sim = simulate(args.design, args.seed, &overrides)?;
    let beta: Vec<f64> = sim.beta_true.iter().copied().collect();
    let mut info = meta("simulate", Some(args.seed), args);
    info["beta_true"] = serde_json::json!(beta);
    info["resolved"] = serde_json::to_value(&sim.config)?;
    let mut w = create(&args.out)?;
    write_dataset(&mut w, &sim.dataset, Some(&info))?;
    w.flush()?;
    if let Some(path) = &args.truth {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &info)?;
        w.flush()?;
    }
    eprintln!("wrote N = {}, d = {} to {}", sim.dataset.n(), sim.dataset.d(), args.out.display());
    Ok(())
}

fn binary(data: Ingested, alg: Algorithm) -> Result<Dataset> {
    match data {
        Ingested::Binary(ds) => Ok(ds),
        Ingested::Multinomial(_) => Err(Error::InvalidInput(format!("{alg} needs a y,m,x1.. file"))),
    }
}

fn lasso_penalty(args: &PenaltyArgs, x: &DMatrix<f64>, d: usize, required: bool) -> Result<PenaltySpec> {
    let spec = match (args.penalty, args.lambda) {
        (Some(PenaltyKind::Bridge), _) => return Err(Error::InvalidInput("this algorithm takes a lasso penalty".into())),
        (Some(PenaltyKind::None), _) if required => return Err(Error::InvalidInput("this algorithm needs --penalty lasso".into())),
        (Some(PenaltyKind::None), _) | (None, None) if !required => PenaltySpec::none(d),
        (_, Some(l)) => PenaltySpec::lasso(l, d)?,
        (_, None) => return Err(Error::InvalidInput("--lambda is required".into())),
    };
    if args.exempt_intercept {
        spec.exempt_intercepts(x)
    } else {
        Ok(spec)
    }
}

fn bridge_penalty(args: &PenaltyArgs, x: &DMatrix<f64>, d: usize) -> Result<PenaltySpec> {
    if matches!(args.penalty, Some(PenaltyKind::Lasso | PenaltyKind::None)) {
        return Err(Error::InvalidInput("bridge takes --penalty bridge".into()));
    }
    let lambda = args.lambda.ok_or_else(|| Error::InvalidInput("--lambda is required".into()))?;
    let spec = PenaltySpec::bridge(lambda, args.alpha, d)?;
    if args.exempt_intercept {
        spec.exempt_intercepts(x)
    } else {
        Ok(spec)
    }
}

#[derive(Serialize)]
struct MultiReportJson<'a, C: Serialize> {
    algorithm: Algorithm,
    seed: u64,
    config: &'a C,
    /// d rows of K class coefficients.
    coefficients: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
    diverged: bool,
    trace: Vec<(usize, f64)>,
}

fn write_multi_report(fit: &MultiFit, alg: Algorithm, args: &FitArgs) -> Result<()> {
    let coefficients = fit.coef.b.row_iter().map(|r| r.iter().copied().collect()).collect();
    let json = MultiReportJson {
        algorithm: alg,
        seed: args.solver.seed,
        config: &meta("fit", Some(args.solver.seed), args),
        coefficients,
        iterations: fit.iterations,
        converged: fit.converged,
        diverged: fit.diverged,
        trace: fit.trace.iter().map(|e| (e.iteration, e.objective)).collect(),
    };
    let mut w = create(&args.out)?;
    serde_json::to_writer_pretty(&mut w, &json)?;
    w.flush()?;
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let data = ingest_csv(&args.data)?;
    let alg = args.algorithm;
    let s = &args.solver;
    if matches!(alg, Algorithm::Ecm | Algorithm::PartialIrls) {
        let md: MultiDataset = match data {
            Ingested::Multinomial(md) => md,
            Ingested::Binary(ds) if ds.is_bernoulli() => {
                let labels: Vec<usize> = ds.y().iter().map(|&y| y as usize + 1).collect();
                MultiDataset::from_labels(&labels, 2, ds.x().clone())?
            }
            Ingested::Binary(_) => return Err(Error::InvalidInput(format!("{alg} needs class labels"))),
        };
        let pen = lasso_penalty(&args.penalty, md.x(), md.d(), false)?;
        let fit = if alg == Algorithm::Ecm {
            fit_ecm(&md, &pen, s.tol, s.max_iter)?
        } else {
            fit_partial_irls(&md, &pen, s.tol, s.max_iter)?
        };
        return write_multi_report(&fit, alg, args);
    }
    let ds = binary(data, alg)?;
    let d = ds.d();
    let prior = GaussianPrior::isotropic(d, s.prior_precision)?;
    let zero = DVector::zeros(d);
    let report: FitReport = match alg {
        Algorithm::Em => fit_em(&ds, &prior, &zero, s.tol, s.max_iter)?,
        Algorithm::Qnem => fit_qnem(&ds, &prior, &zero, s.tol, s.max_iter)?,
        Algorithm::Vb => fit_vb(&ds, &prior, s.tol, s.max_iter)?,
        Algorithm::OnlineEm => fit_online_em(&ds, &prior, &args.online.online(d, s.seed)?, |_, _| {})?.0,
        Algorithm::Sgd => fit_sgd(&ds, &prior, args.online.rate()?, args.online.passes.unwrap_or(50), s.seed)?,
        Algorithm::IrlsCd => fit_irls_cd(&ds, &lasso_penalty(&args.penalty, ds.x(), d, false)?, s.tol, s.max_iter)?,
        Algorithm::DaCd => fit_lasso_em(&ds, &lasso_penalty(&args.penalty, ds.x(), d, true)?, LassoSolver::Cd, s.tol, s.max_iter)?,
        Algorithm::DaCg => fit_lasso_em(&ds, &lasso_penalty(&args.penalty, ds.x(), d, true)?, LassoSolver::Cg, s.tol, s.max_iter)?,
        Algorithm::Bridge => fit_bridge_em(&ds, &bridge_penalty(&args.penalty, ds.x(), d)?, s.tol, s.max_iter)?,
        Algorithm::Ecm | Algorithm::PartialIrls => unreachable!(),
    };
    if !report.converged {
        log::warn!("{alg} stopped after {} iterations without converging", report.iterations);
    }
    let json = ReportJson::new(&report, &meta("fit", Some(s.seed), args), s.seed)?;
    let mut w = create(&args.out)?;
    json.write(&mut w)?;
    w.flush()?;
    eprintln!("{alg}: {} iterations, converged = {}", report.iterations, report.converged);
    Ok(())
}

fn path_method(alg: Algorithm, alpha: f64) -> Result<PathMethod> {
    match alg {
        Algorithm::IrlsCd => Ok(PathMethod::IrlsCd),
        Algorithm::DaCd => Ok(PathMethod::DaCd),
        Algorithm::DaCg => Ok(PathMethod::DaCg),
        Algorithm::Bridge => Ok(PathMethod::Bridge { alpha }),
        other => Err(Error::InvalidInput(format!("{other} has no solution path; use irls-cd, da-cd, da-cg or bridge"))),
    }
}

fn build_grid(spec: &str, ds: &Dataset, exempt: &[bool], ratio: f64) -> Result<Vec<f64>> {
    if spec.contains(',') {
        return spec
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad grid value '{t}'"))))
            .collect();
    }
    let points: usize = spec.trim().parse().map_err(|_| Error::InvalidInput(format!("bad grid '{spec}'")))?;
    default_grid(lambda_max(ds, exempt)?, points, ratio)
}

fn run_path(args: &PathArgs) -> Result<()> {
    let ds = binary(ingest_csv(&args.data)?, args.algorithm)?;
    let method = path_method(args.algorithm, args.penalty.alpha)?;
    let exempt = if args.penalty.exempt_intercept { intercept_columns(ds.x()) } else { vec![false; ds.d()] };
    let grid = build_grid(&args.grid, &ds, &exempt, args.lambda_min_ratio)?;
    let opts = PathOptions { method, exempt, warm_start: !args.cold, tol: args.solver.tol, max_iter: args.solver.max_iter };
    let path = solution_path(&ds, &grid, &opts)?;
    let mut w = create(&args.out)?;
    write_meta_comment(&mut w, &meta("path", Some(args.solver.seed), args))?;
    path.write_csv(&mut w)?;
    w.flush()?;
    eprintln!("{} grid points, {} failures", grid.len(), path.failures.len());
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let s = &args.solver;
    let ds = match &args.data {
        Some(p) => binary(ingest_csv(p)?, Algorithm::Em)?,
        None => {
            let o = SimOverrides { n: args.n, d: args.d, factors: args.factors, family: None };
            simulate(args.design, s.seed, &o)?.dataset
        }
    };
    let info = meta("benchmark", Some(s.seed), args);
    let (dense, sparse): (Vec<Algorithm>, Vec<Algorithm>) = args
        .algorithm
        .iter()
        .partition(|a| matches!(a, Algorithm::Em | Algorithm::Qnem | Algorithm::Vb | Algorithm::OnlineEm | Algorithm::Sgd));
    let mut summary = serde_json::json!({ "seed": s.seed, "config": info });
    if !dense.is_empty() {
        let (train, test) = holdout_split(&ds, args.holdout_frac, s.seed)?;
        let cfg = BenchConfig {
            arms: dense,
            prior_precision: s.prior_precision,
            tol: s.tol,
            max_iter: s.max_iter,
            online: args.online.online(ds.d(), s.seed)?,
            sgd_rate: args.online.rate()?,
            sgd_passes: args.sgd_passes,
            match_wall_clock: args.match_wall_clock,
            seed: s.seed,
        };
        let result = run_benchmark(&train, &test, &cfg)?;
        let mut w = create(&with_suffix(&args.out, ".trace.csv"))?;
        result.write_trace_csv(&mut w)?;
        w.flush()?;
        summary["arms"] = serde_json::to_value(&result.arms)?;
        for arm in &result.arms {
            match (&arm.error, arm.final_logloss) {
                (Some(e), _) => eprintln!("{}: failed: {e}", arm.algorithm),
                (None, Some(l)) => eprintln!("{}: {} passes, {:.3}s, held-out log loss {l:.6}", arm.algorithm, arm.passes, arm.seconds),
                _ => {}
            }
        }
    }
    let mut curves = Vec::new();
    let mut failed = Vec::new();
    if !sparse.is_empty() {
        let exempt = vec![false; ds.d()];
        let grid = build_grid(&args.grid, &ds, &exempt, args.lambda_min_ratio)?;
        for alg in sparse {
            let method = match path_method(alg, 0.5) {
                Ok(m) => m,
                Err(e) => {
                    failed.push(serde_json::json!({ "algorithm": alg, "error": e.to_string() }));
                    continue;
                }
            };
            match holdout_paths(&ds, &[method], &grid, args.holdout_frac, args.replicates, s.seed, s.tol, s.max_iter) {
                Ok(mut c) => curves.append(&mut c),
                Err(e) => failed.push(serde_json::json!({ "algorithm": alg, "error": e.to_string() })),
            }
        }
        let mut w = create(&with_suffix(&args.out, ".holdout.csv"))?;
        write_meta_comment(&mut w, &info)?;
        writeln!(w, "algorithm,lambda,misclassification")?;
        for c in &curves {
            for (l, e) in c.lambdas.iter().zip(&c.mean_error) {
                writeln!(w, "{},{},{}", c.method, fmt_float(*l), fmt_float(*e))?;
            }
        }
        w.flush()?;
        summary["holdout"] = serde_json::to_value(&curves)?;
        summary["failed"] = serde_json::json!(failed);
    }
    let mut w = create(&with_suffix(&args.out, ".summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.flush()?;
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let model: serde_json::Value = serde_json::from_reader(std::io::BufReader::new(File::open(&args.model)?))?;
    let data = ingest_csv(&args.data)?;
    let x = match &data {
        Ingested::Binary(ds) => ds.x().clone(),
        Ingested::Multinomial(md) => md.x().clone(),
    };
    let mut w = create(&args.out)?;
    write_meta_comment(&mut w, &meta("predict", model.get("seed").and_then(|v| v.as_u64()), args))?;
    if let Some(rows) = model.get("coefficients") {
        let rows: Vec<Vec<f64>> = serde_json::from_value(rows.clone())?;
        let k = rows.first().map_or(0, Vec::len);
        let b = DMatrix::from_fn(rows.len(), k, |j, c| rows[j][c]);
        let p = class_probs(&CoefBlock { b }, &x)?;
        let header: Vec<String> = (1..=k).map(|c| format!("p{c}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for r in p.row_iter() {
            writeln!(w, "{}", r.iter().map(|&v| fmt_float(v)).collect::<Vec<_>>().join(","))?;
        }
    } else {
        let report: ReportJson = serde_json::from_value(model)?;
        if report.beta_hat.len() != x.ncols() {
            return Err(Error::DimensionMismatch { what: "model coefficients", expected: x.ncols(), got: report.beta_hat.len() });
        }
        let psi = &x * DVector::from_vec(report.beta_hat);
        writeln!(w, "prob")?;
        for v in psi.iter() {
            writeln!(w, "{}", fmt_float(sigmoid(*v)))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Path(a) => run_path(a),
        Command::Benchmark(a) => run_bench(a),
        Command::Predict(a) => run_predict(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
