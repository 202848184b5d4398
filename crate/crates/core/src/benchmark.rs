//! Benchmark harness: runs several estimators on one train/test split and
//! records held-out log loss against wall-clock time, plus a held-out
//! misclassification comparison for the penalized paths.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use crate::em::{fit_em, fit_qnem, Algorithm, FitReport};
use crate::error::{Error, Result};
use crate::io::{fmt_float, write_meta_comment};
use crate::model::{mean_log_loss, Dataset, GaussianPrior};
use crate::online::{fit_online_em, polyak_ruppert, LearnRate, OnlineConfig, Sgd};
use crate::simulate::holdout_split;
use crate::sparse::{solution_path, PathMethod, PathOptions};
use crate::vb::fit_vb;

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub arms: Vec<Algorithm>,
    /// Isotropic prior precision.
    pub prior_precision: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub online: OnlineConfig,
    pub sgd_rate: LearnRate,
    pub sgd_passes: usize,
    /// Give SGD the online arm's wall-clock time instead of `sgd_passes`.
    pub match_wall_clock: bool,
    pub seed: u64,
}

impl BenchConfig {
    pub fn for_dim(d: usize, seed: u64) -> Self {
        Self {
            arms: vec![Algorithm::Em, Algorithm::OnlineEm, Algorithm::Sgd],
            prior_precision: 1e-5,
            tol: 1e-8,
            max_iter: 10_000,
            online: OnlineConfig { seed, ..OnlineConfig::for_dim(d) },
            sgd_rate: LearnRate::default(),
            sgd_passes: 50,
            match_wall_clock: false,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub algorithm: Algorithm,
    pub pass: usize,
    pub seconds: f64,
    pub logloss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub algorithm: Algorithm,
    pub passes: usize,
    pub seconds: f64,
    pub final_logloss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub arms: Vec<ArmSummary>,
}

impl BenchResult {
    pub fn summary(&self, algorithm: Algorithm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.algorithm == algorithm)
    }

    /// CSV with columns `algorithm, pass, seconds, logloss, grad_norm`.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_meta_comment(&mut w, &serde_json::json!({ "seed": self.config.seed, "config": &self.config }))?;
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(["algorithm", "pass", "seconds", "logloss", "grad_norm"])?;
        for r in &self.rows {
            cw.write_record([r.algorithm.as_str().to_string(), r.pass.to_string(), fmt_float(r.seconds), fmt_float(r.logloss), fmt_float(r.grad_norm)])?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn write_summary_json<W: Write>(&self, w: W) -> Result<()> {
        let v = serde_json::json!({ "seed": self.config.seed, "config": &self.config, "arms": &self.arms });
        serde_json::to_writer_pretty(w, &v)?;
        Ok(())
    }
}

struct Arm {
    rows: Vec<BenchRow>,
    seconds: f64,
    passes: usize,
}

fn row(algorithm: Algorithm, pass: usize, seconds: f64, test: &Dataset, beta: &DVector<f64>, grad_norm: f64) -> Result<BenchRow> {
    Ok(BenchRow { algorithm, pass, seconds, logloss: mean_log_loss(test, beta)?, grad_norm })
}

fn batch_arm(alg: Algorithm, train: &Dataset, test: &Dataset, prior: &GaussianPrior, cfg: &BenchConfig) -> Result<Arm> {
    let zero = DVector::zeros(train.d());
    let start = Instant::now();
    let fit: FitReport = match alg {
        Algorithm::Em => fit_em(train, prior, &zero, cfg.tol, cfg.max_iter)?,
        Algorithm::Qnem => fit_qnem(train, prior, &zero, cfg.tol, cfg.max_iter)?,
        Algorithm::Vb => fit_vb(train, prior, cfg.tol, cfg.max_iter)?,
        _ => unreachable!(),
    };
    let seconds = start.elapsed().as_secs_f64();
    let rows = vec![
        row(alg, 0, 0.0, test, &zero, f64::NAN)?,
        row(alg, fit.iterations, seconds, test, &fit.beta_hat, fit.grad_norm)?,
    ];
    Ok(Arm { rows, seconds, passes: fit.iterations })
}

fn online_arm(train: &Dataset, test: &Dataset, prior: &GaussianPrior, cfg: &BenchConfig) -> Result<Arm> {
    let mut rows = vec![row(Algorithm::OnlineEm, 0, 0.0, test, &DVector::zeros(train.d()), f64::NAN)?];
    let start = Instant::now();
    let mut eval_time = 0.0;
    let mut failure = None;
    fit_online_em(train, prior, &cfg.online, |pass, state| {
        let t_eval = Instant::now();
        let elapsed = start.elapsed().as_secs_f64() - eval_time;
        let beta = polyak_ruppert(state).unwrap_or_else(|_| state.beta.clone());
        match row(Algorithm::OnlineEm, pass, elapsed, test, &beta, f64::NAN) {
            Ok(r) => rows.push(r),
            Err(e) => failure = Some(e),
        }
        eval_time += t_eval.elapsed().as_secs_f64();
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let seconds = start.elapsed().as_secs_f64() - eval_time;
    Ok(Arm { rows, seconds, passes: cfg.online.passes })
}

fn sgd_arm(train: &Dataset, test: &Dataset, prior: &GaussianPrior, cfg: &BenchConfig, budget: Option<f64>) -> Result<Arm> {
    let mut sgd = Sgd::new(train.d(), cfg.sgd_rate, cfg.seed);
    let mut rows = vec![row(Algorithm::Sgd, 0, 0.0, test, &sgd.beta, f64::NAN)?];
    let mut seconds = 0.0;
    let mut pass = 0;
    loop {
        let t = Instant::now();
        sgd.pass(train, prior)?;
        seconds += t.elapsed().as_secs_f64();
        pass += 1;
        rows.push(row(Algorithm::Sgd, pass, seconds, test, &sgd.beta, f64::NAN)?);
        let done = match budget {
            Some(b) => seconds >= b || pass >= 100_000,
            None => pass >= cfg.sgd_passes,
        };
        if done {
            break;
        }
    }
    Ok(Arm { rows, seconds, passes: pass })
}

/// Runs every configured arm on `train`, evaluating on `test`. A failing
/// arm is recorded in its summary and the others still run.
pub fn run_benchmark(train: &Dataset, test: &Dataset, cfg: &BenchConfig) -> Result<BenchResult> {
    if train.d() != test.d() {
        return Err(Error::DimensionMismatch { what: "test feature dimension", expected: train.d(), got: test.d() });
    }
    let prior = GaussianPrior::isotropic(train.d(), cfg.prior_precision)?;
    let mut rows = Vec::new();
    let mut arms = Vec::new();
    let mut online_seconds = None;
    // online EM first so SGD can borrow its time budget
    let mut order = cfg.arms.clone();
    order.sort_by_key(|a| *a != Algorithm::OnlineEm);
    for alg in order {
        let outcome = match alg {
            Algorithm::Em | Algorithm::Qnem | Algorithm::Vb => batch_arm(alg, train, test, &prior, cfg),
            Algorithm::OnlineEm => online_arm(train, test, &prior, cfg),
            Algorithm::Sgd => {
                let budget = if cfg.match_wall_clock { online_seconds } else { None };
                sgd_arm(train, test, &prior, cfg, budget)
            }
            other => Err(Error::InvalidInput(format!("{other} is not a log-loss benchmark arm"))),
        };
        match outcome {
            Ok(arm) => {
                if alg == Algorithm::OnlineEm {
                    online_seconds = Some(arm.seconds);
                }
                let final_logloss = arm.rows.last().map(|r| r.logloss);
                arms.push(ArmSummary { algorithm: alg, passes: arm.passes, seconds: arm.seconds, final_logloss, error: None });
                rows.extend(arm.rows);
            }
            Err(e) => {
                log::warn!("benchmark arm {alg} failed: {e}");
                arms.push(ArmSummary { algorithm: alg, passes: 0, seconds: 0.0, final_logloss: None, error: Some(e.to_string()) });
            }
        }
    }
    Ok(BenchResult { config: cfg.clone(), rows, arms })
}

/// Share of held-out rows whose sign of `x^T beta` disagrees with the label.
/// Counts are scored against the majority outcome `y > m/2`.
pub fn misclassification(test: &Dataset, beta: &DVector<f64>) -> Result<f64> {
    let psi = test.psi(beta)?;
    let wrong = (0..test.n()).filter(|&t| (psi[t] > 0.0) != (test.y()[t] > 0.5 * test.m()[t])).count();
    Ok(wrong as f64 / test.n().max(1) as f64)
}

/// Mean held-out misclassification per λ over random splits.
#[derive(Debug, Clone, Serialize)]
pub struct HoldoutCurve {
    pub method: String,
    pub lambdas: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub failures: usize,
}

/// Fits each method's path on `replicates` random splits and averages the
/// held-out misclassification at every grid point.
pub fn holdout_paths(
    dataset: &Dataset,
    methods: &[PathMethod],
    grid: &[f64],
    holdout_frac: f64,
    replicates: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<HoldoutCurve>> {
    if replicates == 0 {
        return Err(Error::InvalidInput("need at least one replicate".into()));
    }
    let mut sums = vec![vec![0.0; grid.len()]; methods.len()];
    let mut counts = vec![vec![0usize; grid.len()]; methods.len()];
    let mut failures = vec![0; methods.len()];
    for r in 0..replicates {
        let (train, test) = holdout_split(dataset, holdout_frac, seed.wrapping_add(r as u64))?;
        for (k, &method) in methods.iter().enumerate() {
            let opts = PathOptions { method, exempt: vec![false; dataset.d()], warm_start: true, tol, max_iter };
            let path = solution_path(&train, grid, &opts)?;
            failures[k] += path.failures.len();
            for i in 0..grid.len() {
                let beta = path.betas.row(i).transpose();
                if beta.iter().all(|v| v.is_finite()) {
                    sums[k][i] += misclassification(&test, &beta)?;
                    counts[k][i] += 1;
                }
            }
        }
    }
    Ok(methods
        .iter()
        .enumerate()
        .map(|(k, m)| HoldoutCurve {
            method: m.algorithm().to_string(),
            lambdas: grid.to_vec(),
            mean_error: sums[k].iter().zip(&counts[k]).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect(),
            failures: failures[k],
        })
        .collect())
}
