//! Batch Polya-Gamma EM to the posterior mode, and its quasi-Newton
//! accelerated variant.
//!
//! The E-step replaces each latent `omega_t` by its PG(m_t, psi_t) mean; the
//! M-step solves the Gaussian complete-data normal equations
//! `(X^T Omega X + Sigma^{-1}) beta = X^T kappa + Sigma^{-1} mu`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsolve::{cholesky, cholesky_solve, solve_cg, solve_direct, spd_inverse, CgConfig, SpdSystem};
use crate::model::{kappa, log_posterior, log_posterior_value, weighted_gram, Dataset, GaussianPrior};
use crate::pg_math::tanh_ratio;

/// Which solver produced a [`FitReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Em,
    Qnem,
    Vb,
    OnlineEm,
    Sgd,
    IrlsCd,
    DaCd,
    DaCg,
    Bridge,
    Ecm,
    PartialIrls,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Em => "em",
            Algorithm::Qnem => "qnem",
            Algorithm::Vb => "vb",
            Algorithm::OnlineEm => "online-em",
            Algorithm::Sgd => "sgd",
            Algorithm::IrlsCd => "irls-cd",
            Algorithm::DaCd => "da-cd",
            Algorithm::DaCg => "da-cg",
            Algorithm::Bridge => "bridge",
            Algorithm::Ecm => "ecm",
            Algorithm::PartialIrls => "partial-irls",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "em" => Algorithm::Em,
            "qnem" => Algorithm::Qnem,
            "vb" => Algorithm::Vb,
            "online-em" => Algorithm::OnlineEm,
            "sgd" => Algorithm::Sgd,
            "irls-cd" => Algorithm::IrlsCd,
            "da-cd" => Algorithm::DaCd,
            "da-cg" => Algorithm::DaCg,
            "bridge" => Algorithm::Bridge,
            "ecm" => Algorithm::Ecm,
            "partial-irls" => Algorithm::PartialIrls,
            other => return Err(Error::InvalidInput(format!("unknown algorithm '{other}'"))),
        })
    }
}

/// One row of an iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub step_norm: f64,
}

/// Outcome of a fit.
///
/// For the EM family and VB the trace objective is the log posterior (or the
/// ELBO for VB) and should rise; the penalized fits record the penalized
/// negative log likelihood, which should fall.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub beta_hat: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub algorithm: Algorithm,
    /// Sup-norm of the final (sub)gradient optimality residual.
    pub grad_norm: f64,
    /// Set by baselines that stop on a run of worsening objectives.
    pub diverged: bool,
}

impl FitReport {
    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().map(|e| e.objective)
    }
}

/// State of one EM iteration: the iterate, its E-step weights and the
/// assembled normal equations.
#[derive(Debug, Clone)]
pub struct FitState {
    pub beta: DVector<f64>,
    pub omega: DVector<f64>,
    /// `X^T Omega X + Sigma^{-1}`.
    pub s: DMatrix<f64>,
    /// `X^T kappa + Sigma^{-1} mu`.
    pub d_vec: DVector<f64>,
    pub iteration: usize,
    pub objective: f64,
}

/// E-step: `omega_t = (m_t / 2 psi_t) tanh(psi_t / 2)` at `psi = X beta`.
pub fn e_step(dataset: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let psi = dataset.psi(beta)?;
    Ok(omega_from_psi(dataset.m(), &psi))
}

pub(crate) fn omega_from_psi(m: &DVector<f64>, psi: &DVector<f64>) -> DVector<f64> {
    m.zip_map(psi, |mt, p| mt * tanh_ratio(p))
}

/// Normal equations of the complete-data posterior for given weights.
pub fn assemble(dataset: &Dataset, prior: &GaussianPrior, omega: &DVector<f64>) -> Result<SpdSystem> {
    if omega.len() != dataset.n() {
        return Err(Error::DimensionMismatch { what: "omega length", expected: dataset.n(), got: omega.len() });
    }
    if prior.d() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "prior dimension", expected: dataset.d(), got: prior.d() });
    }
    if let Some(w) = omega.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::Domain(format!("E-step weights must be positive, got {w}")));
    }
    let s = weighted_gram(dataset.x(), omega) + prior.precision();
    let d = dataset.x().tr_mul(&kappa(dataset)) + prior.precision_mean();
    SpdSystem::new(s, d)
}

/// How the M-step solves its normal equations.
#[derive(Debug, Clone)]
pub enum MStepMode {
    Direct,
    /// CG from the warm start in the config (the previous iterate inside
    /// the fitting loops); a loose `eps` gives a partial M-step.
    Cg(CgConfig),
}

/// M-step: solve `(X^T Omega X + Sigma^{-1}) beta = X^T kappa + Sigma^{-1} mu`.
pub fn m_step(dataset: &Dataset, prior: &GaussianPrior, omega: &DVector<f64>, mode: &MStepMode) -> Result<DVector<f64>> {
    let system = assemble(dataset, prior, omega)?;
    match mode {
        MStepMode::Direct => solve_direct(&system),
        MStepMode::Cg(cfg) => Ok(solve_cg(&system, cfg)?.x),
    }
}

/// Options for [`fit_em_with`] and [`fit_qnem_with`].
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub m_step: MStepMode,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 10_000, m_step: MStepMode::Direct }
    }
}

impl EmOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self { tol, max_iter, ..Default::default() }
    }
}

fn validate(dataset: &Dataset, prior: &GaussianPrior, beta0: &DVector<f64>, tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if prior.d() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "prior dimension", expected: dataset.d(), got: prior.d() });
    }
    if beta0.len() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "beta0", expected: dataset.d(), got: beta0.len() });
    }
    Ok(())
}

/// Stopping rule shared by the EM family: a small step backed by a small
/// gradient, or an exactly stationary point.
fn is_converged(step: f64, grad: f64, tol: f64) -> bool {
    grad <= tol || (step <= tol && grad <= 10.0 * tol)
}

/// Batch EM (direct M-step) from `beta0`.
pub fn fit_em(dataset: &Dataset, prior: &GaussianPrior, beta0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<FitReport> {
    fit_em_with(dataset, prior, beta0, &EmOptions::new(tol, max_iter))
}

pub fn fit_em_with(dataset: &Dataset, prior: &GaussianPrior, beta0: &DVector<f64>, opts: &EmOptions) -> Result<FitReport> {
    validate(dataset, prior, beta0, opts.tol)?;
    let mut state = FitState {
        beta: beta0.clone(),
        omega: e_step(dataset, beta0)?,
        s: DMatrix::zeros(0, 0),
        d_vec: DVector::zeros(0),
        iteration: 0,
        objective: log_posterior_value(dataset, prior, beta0)?,
    };
    let mut trace = vec![TraceEntry { iteration: 0, objective: state.objective, step_norm: 0.0 }];
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    while state.iteration < opts.max_iter {
        state.omega = e_step(dataset, &state.beta)?;
        let system = assemble(dataset, prior, &state.omega)?;
        let next = match &opts.m_step {
            MStepMode::Direct => solve_direct(&system)?,
            MStepMode::Cg(cfg) => {
                let cfg = cfg.clone().with_warm_start(state.beta.clone());
                solve_cg(&system, &cfg)?.x
            }
        };
        state.s = system.matrix().clone();
        state.d_vec = system.rhs().clone();
        let step = (&next - &state.beta).amax();
        let report = log_posterior(dataset, prior, &next)?;
        state.beta = next;
        state.objective = report.log_posterior;
        state.iteration += 1;
        grad_norm = report.gradient.amax();
        trace.push(TraceEntry { iteration: state.iteration, objective: state.objective, step_norm: step });
        if is_converged(step, grad_norm, opts.tol) {
            converged = true;
            break;
        }
    }
    let omega = e_step(dataset, &state.beta)?;
    let cov = spd_inverse(assemble(dataset, prior, &omega)?.matrix())?;
    Ok(FitReport {
        beta_hat: state.beta,
        cov: Some(cov),
        trace,
        iterations: state.iteration,
        converged,
        diverged: false,
        algorithm: Algorithm::Em,
        grad_norm,
    })
}

/// Secant approximation to the Hessian of the remainder term `R` in
/// `L = C - R`, where `C` is the complete-data log posterior.
#[derive(Debug, Clone)]
pub struct QnState {
    pub remainder_hessian_approx: DMatrix<f64>,
    pub last_pair: Option<(DVector<f64>, DVector<f64>)>,
    pub updates: usize,
    pub skipped: usize,
}

impl QnState {
    pub fn new(d: usize) -> Self {
        Self { remainder_hessian_approx: DMatrix::zeros(d, d), last_pair: None, updates: 0, skipped: 0 }
    }

    /// Symmetric rank-one update from step `s` and remainder-gradient change
    /// `y`, projected back onto the negative semidefinite cone.
    pub fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let b = &self.remainder_hessian_approx;
        let r = y - b * s;
        let denom = r.dot(s);
        if denom.abs() < 1e-8 * s.norm() * r.norm() || denom == 0.0 {
            self.skipped += 1;
            return;
        }
        let updated = b + &r * r.transpose() / denom;
        self.remainder_hessian_approx = project_nsd(updated);
        self.last_pair = Some((s.clone(), y.clone()));
        self.updates += 1;
    }
}

/// Clamp positive eigenvalues of a symmetric matrix to zero.
fn project_nsd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v <= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.min(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    (&out + out.transpose()) * 0.5
}

/// Quasi-Newton accelerated EM.
///
/// Each step solves `(A + B) delta = grad L`, with `A = X^T Omega X +
/// Sigma^{-1}` the complete-data information and `B` the secant estimate of
/// the remainder Hessian. With `B = 0` this is exactly an EM step. Trial
/// steps are halved up to ten times until the log posterior does not
/// decrease; failing that (or if `A + B` is not positive definite) a plain EM
/// step is taken.
///
/// The reported covariance is `(A + B)^{-1}` at the final iterate.
pub fn fit_qnem(dataset: &Dataset, prior: &GaussianPrior, beta0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<FitReport> {
    fit_qnem_with(dataset, prior, beta0, &EmOptions::new(tol, max_iter)).map(|(r, _)| r)
}

pub fn fit_qnem_with(
    dataset: &Dataset,
    prior: &GaussianPrior,
    beta0: &DVector<f64>,
    opts: &EmOptions,
) -> Result<(FitReport, QnState)> {
    validate(dataset, prior, beta0, opts.tol)?;
    let d = dataset.d();
    let mut qn = QnState::new(d);
    let mut beta = beta0.clone();
    let mut report = log_posterior(dataset, prior, &beta)?;
    let mut info = assemble(dataset, prior, &e_step(dataset, &beta)?)?.matrix().clone();
    let mut trace = vec![TraceEntry { iteration: 0, objective: report.log_posterior, step_norm: 0.0 }];
    let mut iteration = 0;
    let mut converged = report.gradient.amax() <= opts.tol;
    while !converged && iteration < opts.max_iter {
        let grad = report.gradient.clone();
        let mut next = None;
        let full = &info + &qn.remainder_hessian_approx;
        if let Ok(l) = cholesky(&full) {
            let delta = cholesky_solve(&l, &grad);
            let mut scale = 1.0;
            for _ in 0..=10 {
                let trial = &beta + &delta * scale;
                if log_posterior_value(dataset, prior, &trial)? >= report.log_posterior {
                    next = Some(trial);
                    break;
                }
                scale *= 0.5;
            }
        }
        let next = match next {
            Some(b) => b,
            // plain EM step: beta + A^{-1} grad solves the M-step exactly
            None => &beta + solve_direct(&SpdSystem::new(info.clone(), grad.clone())?)?,
        };
        let next_report = log_posterior(dataset, prior, &next)?;
        let next_info = assemble(dataset, prior, &e_step(dataset, &next)?)?.matrix().clone();
        let s = &next - &beta;
        // -(grad change) ~ (A + B) s, so the remainder part is what A misses
        let y = (&grad - &next_report.gradient) - &next_info * &s;
        qn.update(&s, &y);

        let step = s.amax();
        iteration += 1;
        trace.push(TraceEntry { iteration, objective: next_report.log_posterior, step_norm: step });
        beta = next;
        report = next_report;
        info = next_info;
        converged = is_converged(step, report.gradient.amax(), opts.tol);
    }
    let full = &info + &qn.remainder_hessian_approx;
    let cov = match spd_inverse(&full) {
        Ok(c) => c,
        Err(_) => spd_inverse(&info)?,
    };
    let grad_norm = report.gradient.amax();
    Ok((
        FitReport {
            beta_hat: beta,
            cov: Some(cov),
            trace,
            iterations: iteration,
            converged,
            diverged: false,
            algorithm: Algorithm::Qnem,
            grad_norm,
        },
        qn,
    ))
}

/// Square roots of the diagonal of the reported covariance.
pub fn approx_stddev(report: &FitReport) -> Result<DVector<f64>> {
    let cov = report
        .cov
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("{} report carries no covariance", report.algorithm)))?;
    cholesky(cov)?;
    Ok(cov.diagonal().map(f64::sqrt))
}
