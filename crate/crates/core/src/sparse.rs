//! Penalized logistic regression: lasso and bridge fits through the
//! Polya-Gamma quadratic, the penalized IRLS baseline, and λ paths.
//!
//! Sparse fits minimise `-loglik(beta) + penalty(beta)`; their traces record
//! that penalized negative log likelihood.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::em::{fit_em, omega_from_psi, Algorithm, FitReport, TraceEntry};
use crate::error::{Error, Result};
use crate::linsolve::{cg_with_operator, cholesky, cholesky_solve, CgConfig};
use crate::model::{kappa, log_likelihood_at, sigmoid, weighted_gram, Dataset, GaussianPrior};

/// Coefficients below this magnitude are set to zero in the lasso E-step.
pub const LASSO_ZERO: f64 = 1e-8;
/// Bridge coordinates below this magnitude are frozen at zero.
pub const BRIDGE_ZERO: f64 = 1e-4;
/// Probability clamp used by the IRLS baseline.
pub const IRLS_PROB_FLOOR: f64 = 1e-9;
/// Consecutive worsening outer loops after which IRLS is flagged.
pub const IRLS_DIVERGENCE_RUN: usize = 5;
/// Inner coordinate sweeps per DA+CD step. Any number keeps the step a
/// majorize-minimize move, and exact inner solves buy no outer iterations.
pub const DA_CD_SWEEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyFamily {
    None,
    Lasso,
    Bridge { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    family: PenaltyFamily,
    lambda: f64,
    exempt: Vec<bool>,
}

impl PenaltySpec {
    pub fn none(d: usize) -> Self {
        Self { family: PenaltyFamily::None, lambda: 0.0, exempt: vec![false; d] }
    }

    pub fn lasso(lambda: f64, d: usize) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { family: PenaltyFamily::Lasso, lambda, exempt: vec![false; d] })
    }

    pub fn bridge(lambda: f64, alpha: f64, d: usize) -> Result<Self> {
        check_lambda(lambda)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("bridge exponent must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { family: PenaltyFamily::Bridge { alpha }, lambda, exempt: vec![false; d] })
    }

    pub fn with_exempt(mut self, exempt: Vec<bool>) -> Result<Self> {
        if exempt.len() != self.exempt.len() {
            return Err(Error::DimensionMismatch { what: "exemption mask", expected: self.exempt.len(), got: exempt.len() });
        }
        self.exempt = exempt;
        Ok(self)
    }

    /// Exempt every all-ones column of `x` (intercepts).
    pub fn exempt_intercepts(self, x: &DMatrix<f64>) -> Result<Self> {
        let mask = intercept_columns(x);
        self.with_exempt(mask)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { lambda, ..self.clone() })
    }

    pub fn family(&self) -> PenaltyFamily {
        self.family
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn exempt(&self) -> &[bool] {
        &self.exempt
    }

    pub fn d(&self) -> usize {
        self.exempt.len()
    }

    /// Value of the penalty at `beta`.
    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        let pen = beta.iter().zip(&self.exempt).filter(|(_, &e)| !e).map(|(b, _)| *b);
        match self.family {
            PenaltyFamily::None => 0.0,
            PenaltyFamily::Lasso => self.lambda * pen.map(f64::abs).sum::<f64>(),
            PenaltyFamily::Bridge { alpha } => self.lambda * pen.map(|b| b.abs().powf(alpha)).sum::<f64>(),
        }
    }

    /// Per-coordinate ℓ¹ weights (zero for exempt coordinates).
    fn l1_weights(&self) -> Vec<f64> {
        let lam = if self.family == PenaltyFamily::None { 0.0 } else { self.lambda };
        self.exempt.iter().map(|&e| if e { 0.0 } else { lam }).collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || lambda.is_nan() {
        return Err(Error::Domain(format!("penalty strength must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// Mask of all-ones columns.
pub fn intercept_columns(x: &DMatrix<f64>) -> Vec<bool> {
    x.column_iter().map(|c| c.len() > 0 && c.iter().all(|&v| v == 1.0)).collect()
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Penalized weighted least-squares minimiser in coordinate `j` with the
/// others held fixed. A zero denominator leaves `beta[j]` unchanged.
pub fn cd_update(
    j: usize,
    weights: &DVector<f64>,
    working_resp: &DVector<f64>,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    lambda: f64,
) -> f64 {
    let col = x.column(j);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.nrows() {
        let fit_excl = x.row(i).dot(&beta.transpose()) - col[i] * beta[j];
        num += weights[i] * col[i] * (working_resp[i] - fit_excl);
        den += weights[i] * col[i] * col[i];
    }
    if den <= 0.0 {
        log::debug!("coordinate {j} has zero weighted norm; skipped");
        return beta[j];
    }
    soft_threshold(num, lambda) / den
}

/// IRLS weights `p(1-p)` and working responses for the linear predictor.
pub fn irls_weights(dataset: &Dataset, beta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let psi = dataset.psi(beta)?;
    Ok(irls_from_psi(dataset, &psi))
}

fn irls_from_psi(dataset: &Dataset, psi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = psi.len();
    let mut w = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    for t in 0..n {
        let p = sigmoid(psi[t]).clamp(IRLS_PROB_FLOOR, 1.0 - IRLS_PROB_FLOOR);
        let m = dataset.m()[t];
        w[t] = m * p * (1.0 - p);
        z[t] = psi[t] + (dataset.y()[t] - m * p) / w[t];
    }
    (w, z)
}

/// Polya-Gamma weights and working responses `kappa / omega`, so that
/// `-1/2 sum omega (z - psi)^2` is the complete-data log likelihood up to a
/// constant.
pub fn da_weights(dataset: &Dataset, beta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let psi = dataset.psi(beta)?;
    Ok(da_from_psi(dataset, &psi))
}

fn da_from_psi(dataset: &Dataset, psi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let omega = omega_from_psi(dataset.m(), psi);
    let k = kappa(dataset);
    let z = k.component_div(&omega);
    (omega, z)
}

/// Working response written as `(2y - 1) / omega`, valid for `m = 1` only.
/// It is twice [`da_weights`]' response.
pub fn da_weights_doubled(dataset: &Dataset, beta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let psi = dataset.psi(beta)?;
    let omega = omega_from_psi(dataset.m(), &psi);
    let z = DVector::from_fn(psi.len(), |t, _| (2.0 * dataset.y()[t] - 1.0) / omega[t]);
    Ok((omega, z))
}

/// A binomial problem with an optional additive offset in the linear
/// predictor, `psi = X beta + offset`.
#[derive(Clone, Copy)]
pub(crate) struct Problem<'a> {
    pub ds: &'a Dataset,
    pub offset: Option<&'a DVector<f64>>,
}

impl<'a> Problem<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        Self { ds, offset: None }
    }

    pub fn psi(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut psi = self.ds.x() * beta;
        if let Some(o) = self.offset {
            psi += o;
        }
        psi
    }

    fn offset_or_zero(&self) -> DVector<f64> {
        self.offset.cloned().unwrap_or_else(|| DVector::zeros(self.ds.n()))
    }

    pub fn neg_loglik(&self, psi: &DVector<f64>) -> f64 {
        -log_likelihood_at(self.ds, psi)
    }

    pub fn gradient(&self, psi: &DVector<f64>) -> DVector<f64> {
        let r = DVector::from_fn(psi.len(), |t, _| self.ds.y()[t] - self.ds.m()[t] * sigmoid(psi[t]));
        self.ds.x().tr_mul(&r)
    }
}

/// Penalized negative log likelihood.
pub fn penalized_objective(dataset: &Dataset, beta: &DVector<f64>, penalty: &PenaltySpec) -> Result<f64> {
    let psi = dataset.psi(beta)?;
    Ok(-log_likelihood_at(dataset, &psi) + penalty.value(beta))
}

/// Largest violation of the ℓ¹ subgradient conditions given the gradient of
/// the log likelihood.
pub fn lasso_kkt(grad: &DVector<f64>, beta: &DVector<f64>, penalty: &PenaltySpec) -> f64 {
    let lam = penalty.l1_weights();
    let mut worst: f64 = 0.0;
    for j in 0..beta.len() {
        let v = if lam[j] == 0.0 {
            grad[j].abs()
        } else if beta[j] != 0.0 {
            (grad[j] - lam[j] * beta[j].signum()).abs()
        } else {
            (grad[j].abs() - lam[j]).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Coordinate descent on `1/2 sum w (target - X beta)^2 + sum lam_j |beta_j|`,
/// alternating full sweeps with sweeps over the active set.
fn cd_solve(x: &DMatrix<f64>, w: &DVector<f64>, target: &DVector<f64>, beta: &mut DVector<f64>, lam: &[f64], tol: f64, max_sweeps: usize) {
    let d = x.ncols();
    let colsq: Vec<f64> = (0..d).map(|j| x.column(j).iter().zip(w.iter()).map(|(a, wi)| wi * a * a).sum()).collect();
    let mut r = target - x * &*beta;
    let sweep = |coords: &mut dyn Iterator<Item = usize>, beta: &mut DVector<f64>, r: &mut DVector<f64>| -> f64 {
        let mut change: f64 = 0.0;
        for j in coords {
            if colsq[j] <= 0.0 {
                continue;
            }
            let col = x.column(j);
            let mut rho = 0.0;
            for i in 0..col.len() {
                rho += w[i] * col[i] * r[i];
            }
            let old = beta[j];
            let new = soft_threshold(rho + colsq[j] * old, lam[j]) / colsq[j];
            let delta = new - old;
            if delta != 0.0 {
                r.axpy(-delta, &col, 1.0);
                beta[j] = new;
                change = change.max(delta.abs() * colsq[j].sqrt());
            }
        }
        change
    };
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let change = sweep(&mut (0..d), beta, &mut r);
        sweeps += 1;
        if change <= tol {
            break;
        }
        let active: Vec<usize> = (0..d).filter(|&j| beta[j] != 0.0 || lam[j] == 0.0).collect();
        while sweeps < max_sweeps {
            let c = sweep(&mut active.iter().copied(), beta, &mut r);
            sweeps += 1;
            if c <= tol {
                break;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LassoSolver {
    Cd,
    Cg,
}

impl LassoSolver {
    pub fn algorithm(self) -> Algorithm {
        match self {
            LassoSolver::Cd => Algorithm::DaCd,
            LassoSolver::Cg => Algorithm::DaCg,
        }
    }
}

fn converged(kkt: f64, step: f64, tol: f64) -> bool {
    kkt <= tol || (step <= tol && kkt <= 10.0 * tol)
}

pub fn fit_lasso_em(dataset: &Dataset, penalty: &PenaltySpec, solver: LassoSolver, tol: f64, max_iter: usize) -> Result<FitReport> {
    fit_lasso_em_from(dataset, penalty, solver, &DVector::zeros(dataset.d()), tol, max_iter)
}

pub fn fit_lasso_em_from(
    dataset: &Dataset,
    penalty: &PenaltySpec,
    solver: LassoSolver,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<FitReport> {
    if penalty.family != PenaltyFamily::Lasso || !(penalty.lambda > 0.0) {
        return Err(Error::Domain("lasso EM needs a lasso penalty with lambda > 0".into()));
    }
    check_dims(dataset, penalty, beta0)?;
    lasso_em(Problem::new(dataset), penalty, solver, beta0, tol, max_iter)
}

fn check_dims(dataset: &Dataset, penalty: &PenaltySpec, beta0: &DVector<f64>) -> Result<()> {
    if penalty.d() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "penalty mask", expected: dataset.d(), got: penalty.d() });
    }
    if beta0.len() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "starting coefficients", expected: dataset.d(), got: beta0.len() });
    }
    Ok(())
}

/// One data-augmentation EM step for the lasso. Returns the new iterate.
pub(crate) fn lasso_em_step(prob: Problem<'_>, penalty: &PenaltySpec, solver: LassoSolver, beta: &DVector<f64>, psi: &DVector<f64>, inner_tol: f64) -> Result<DVector<f64>> {
    let x = prob.ds.x();
    let (omega, z) = da_from_psi(prob.ds, psi);
    let target = z - prob.offset_or_zero();
    let lam = penalty.l1_weights();
    let mut next = beta.clone();
    match solver {
        LassoSolver::Cd => cd_solve(x, &omega, &target, &mut next, &lam, inner_tol, DA_CD_SWEEPS),
        LassoSolver::Cg => {
            let d = x.ncols();
            // zeroed coordinates re-enter by one soft-thresholded coordinate step
            let grad = prob.gradient(psi);
            for j in 0..d {
                if lam[j] > 0.0 && next[j] == 0.0 && grad[j].abs() > lam[j] {
                    let colsq: f64 = x.column(j).iter().zip(omega.iter()).map(|(a, w)| w * a * a).sum();
                    if colsq > 0.0 {
                        next[j] = soft_threshold(grad[j], lam[j]) / colsq;
                    }
                }
            }
            let active: Vec<usize> = (0..d).filter(|&j| lam[j] == 0.0 || next[j] != 0.0).collect();
            if !active.is_empty() {
                let xa = x.select_columns(active.iter());
                let mut a = weighted_gram(&xa, &omega);
                for (k, &j) in active.iter().enumerate() {
                    if lam[j] > 0.0 {
                        a[(k, k)] += lam[j] / next[j].abs();
                    }
                }
                let rhs = xa.tr_mul(&omega.component_mul(&target));
                let start = DVector::from_fn(active.len(), |k, _| next[active[k]]);
                let sol = jacobi_cg(&a, &rhs, start)?;
                for (k, &j) in active.iter().enumerate() {
                    next[j] = sol[k];
                }
            }
            for j in 0..d {
                if lam[j] > 0.0 && next[j].abs() < LASSO_ZERO {
                    next[j] = 0.0;
                }
            }
        }
    }
    Ok(next)
}

/// Conjugate gradients on the diagonally rescaled system.
fn jacobi_cg(a: &DMatrix<f64>, rhs: &DVector<f64>, start: DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let s = DVector::from_fn(n, |i, _| 1.0 / a[(i, i)].sqrt());
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * s[i] * s[j]);
    let b = rhs.component_mul(&s);
    let u0 = start.component_div(&s);
    let cfg = CgConfig::new(1e-12, 20 * n.max(1))?.with_warm_start(u0);
    let out = cg_with_operator(|v| &scaled * v, &b, &cfg)?;
    Ok(out.x.component_mul(&s))
}

fn lasso_em(prob: Problem<'_>, penalty: &PenaltySpec, solver: LassoSolver, beta0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<FitReport> {
    let mut beta = beta0.clone();
    if solver == LassoSolver::Cg {
        for (j, b) in beta.iter_mut().enumerate() {
            if !penalty.exempt[j] && b.abs() < LASSO_ZERO {
                *b = 0.0;
            }
        }
    }
    let mut psi = prob.psi(&beta);
    let mut obj = prob.neg_loglik(&psi) + penalty.value(&beta);
    let mut trace = vec![TraceEntry { iteration: 0, objective: obj, step_norm: 0.0 }];
    let mut kkt = lasso_kkt(&prob.gradient(&psi), &beta, penalty);
    let mut done = kkt <= tol;
    let mut iter = 0;
    let inner_tol = (tol * 1e-2).max(1e-14);
    while !done && iter < max_iter {
        iter += 1;
        let next = lasso_em_step(prob, penalty, solver, &beta, &psi, inner_tol)?;
        let step = (&next - &beta).amax();
        beta = next;
        psi = prob.psi(&beta);
        obj = prob.neg_loglik(&psi) + penalty.value(&beta);
        kkt = lasso_kkt(&prob.gradient(&psi), &beta, penalty);
        trace.push(TraceEntry { iteration: iter, objective: obj, step_norm: step });
        done = converged(kkt, step, tol) || (step == 0.0 && kkt <= 10.0 * tol);
        if step == 0.0 && !done {
            log::debug!("lasso EM stalled with subgradient residual {kkt:e}");
            break;
        }
    }
    Ok(FitReport {
        beta_hat: beta,
        cov: None,
        trace,
        iterations: iter,
        converged: done,
        diverged: false,
        algorithm: solver.algorithm(),
        grad_norm: kkt,
    })
}

/// Penalized IRLS with inner coordinate descent. Returns the best iterate
/// seen; a run of worsening objectives is flagged as divergence.
pub fn fit_irls_cd(dataset: &Dataset, penalty: &PenaltySpec, tol: f64, max_iter: usize) -> Result<FitReport> {
    fit_irls_cd_from(dataset, penalty, &DVector::zeros(dataset.d()), tol, max_iter)
}

pub fn fit_irls_cd_from(dataset: &Dataset, penalty: &PenaltySpec, beta0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<FitReport> {
    if matches!(penalty.family, PenaltyFamily::Bridge { .. }) {
        return Err(Error::Domain("IRLS-CD supports lasso or no penalty".into()));
    }
    check_dims(dataset, penalty, beta0)?;
    irls_cd(Problem::new(dataset), penalty, beta0, tol, max_iter)
}

pub(crate) fn irls_cd(prob: Problem<'_>, penalty: &PenaltySpec, beta0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<FitReport> {
    let lam = penalty.l1_weights();
    let x = prob.ds.x();
    let mut beta = beta0.clone();
    let mut psi = prob.psi(&beta);
    let mut obj = prob.neg_loglik(&psi) + penalty.value(&beta);
    let mut kkt = lasso_kkt(&prob.gradient(&psi), &beta, penalty);
    let mut trace = vec![TraceEntry { iteration: 0, objective: obj, step_norm: 0.0 }];
    let (mut best, mut best_obj, mut best_kkt) = (beta.clone(), obj, kkt);
    let mut worse_run = 0;
    let mut diverged = false;
    let mut done = kkt <= tol;
    let mut iter = 0;
    let inner_tol = (tol * 1e-2).max(1e-14);
    while !done && iter < max_iter {
        iter += 1;
        let (w, z) = irls_from_psi(prob.ds, &psi);
        let target = z - prob.offset_or_zero();
        let mut next = beta.clone();
        cd_solve(x, &w, &target, &mut next, &lam, inner_tol, 10_000);
        let step = (&next - &beta).amax();
        beta = next;
        psi = prob.psi(&beta);
        let new_obj = prob.neg_loglik(&psi) + penalty.value(&beta);
        kkt = lasso_kkt(&prob.gradient(&psi), &beta, penalty);
        trace.push(TraceEntry { iteration: iter, objective: new_obj, step_norm: step });
        if !new_obj.is_finite() || new_obj > obj {
            worse_run += 1;
        } else {
            worse_run = 0;
        }
        obj = new_obj;
        if obj <= best_obj || (obj.is_finite() && !best_obj.is_finite()) {
            best = beta.clone();
            best_obj = obj;
            best_kkt = kkt;
        }
        if worse_run >= IRLS_DIVERGENCE_RUN {
            log::warn!("IRLS objective worsened {IRLS_DIVERGENCE_RUN} outer loops running; stopping");
            diverged = true;
            break;
        }
        done = converged(kkt, step, tol);
        if step == 0.0 && !done {
            break;
        }
    }
    if done {
        // objective ties near the optimum are rounding noise; keep the iterate that met the test
        best = beta;
        best_kkt = kkt;
    }
    Ok(FitReport {
        beta_hat: best,
        cov: None,
        trace,
        iterations: iter,
        converged: done && !diverged,
        diverged,
        algorithm: Algorithm::IrlsCd,
        grad_norm: best_kkt,
    })
}

/// Bridge-penalized EM. Starts from a lightly ridged EM fit.
pub fn fit_bridge_em(dataset: &Dataset, penalty: &PenaltySpec, tol: f64, max_iter: usize) -> Result<FitReport> {
    let prior = GaussianPrior::isotropic(dataset.d(), 1.0)?;
    let start = fit_em(dataset, &prior, &DVector::zeros(dataset.d()), 1e-6, 1000)?.beta_hat;
    fit_bridge_em_from(dataset, penalty, &start, tol, max_iter)
}

/// Precision the bridge E-step places on a coordinate at `beta_j`.
pub fn bridge_precision(lambda: f64, alpha: f64, beta_j: f64) -> f64 {
    lambda * alpha * beta_j.abs().powf(alpha - 2.0)
}

pub fn fit_bridge_em_from(dataset: &Dataset, penalty: &PenaltySpec, beta0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<FitReport> {
    let alpha = match penalty.family {
        PenaltyFamily::Bridge { alpha } => alpha,
        _ => return Err(Error::Domain("bridge EM needs a bridge penalty".into())),
    };
    if !(penalty.lambda > 0.0) {
        return Err(Error::Domain("bridge EM needs lambda > 0".into()));
    }
    check_dims(dataset, penalty, beta0)?;
    let prob = Problem::new(dataset);
    let x = dataset.x();
    let d = dataset.d();
    let mut beta = beta0.clone();
    let mut frozen: Vec<bool> = (0..d).map(|j| !penalty.exempt[j] && beta[j].abs() < BRIDGE_ZERO).collect();
    for j in 0..d {
        if frozen[j] {
            beta[j] = 0.0;
        }
    }
    let mut psi = prob.psi(&beta);
    let mut obj = prob.neg_loglik(&psi) + penalty.value(&beta);
    let mut trace = vec![TraceEntry { iteration: 0, objective: obj, step_norm: 0.0 }];
    let mut iter = 0;
    let mut done = false;
    let mut grad_norm = f64::NAN;
    while !done && iter < max_iter {
        iter += 1;
        let (omega, z) = da_from_psi(dataset, &psi);
        let active: Vec<usize> = (0..d).filter(|&j| !frozen[j]).collect();
        let mut next = DVector::zeros(d);
        if !active.is_empty() {
            let xa = x.select_columns(active.iter());
            let mut a = weighted_gram(&xa, &omega);
            for (k, &j) in active.iter().enumerate() {
                if !penalty.exempt[j] {
                    a[(k, k)] += bridge_precision(penalty.lambda, alpha, beta[j]);
                }
            }
            let rhs = xa.tr_mul(&omega.component_mul(&z));
            let sol = cholesky_solve(&cholesky(&a)?, &rhs);
            for (k, &j) in active.iter().enumerate() {
                next[j] = sol[k];
            }
        }
        for j in 0..d {
            if !frozen[j] && !penalty.exempt[j] && next[j].abs() < BRIDGE_ZERO {
                frozen[j] = true;
                next[j] = 0.0;
            }
        }
        let step = (&next - &beta).amax();
        beta = next;
        psi = prob.psi(&beta);
        obj = prob.neg_loglik(&psi) + penalty.value(&beta);
        trace.push(TraceEntry { iteration: iter, objective: obj, step_norm: step });
        // stationarity of the smooth part over the live coordinates
        let g = prob.gradient(&psi);
        grad_norm = (0..d)
            .filter(|&j| !frozen[j])
            .map(|j| {
                let pen = if penalty.exempt[j] { 0.0 } else { penalty.lambda * alpha * beta[j].abs().powf(alpha - 1.0) * beta[j].signum() };
                (g[j] - pen).abs()
            })
            .fold(0.0, f64::max);
        done = grad_norm <= tol || step <= tol;
    }
    Ok(FitReport {
        beta_hat: beta,
        cov: None,
        trace,
        iterations: iter,
        converged: done,
        diverged: false,
        algorithm: Algorithm::Bridge,
        grad_norm,
    })
}

/// Smallest λ at which the lasso solution has every penalized coefficient at
/// zero. With exempt coordinates those are fitted first.
pub fn lambda_max(dataset: &Dataset, exempt: &[bool]) -> Result<f64> {
    if exempt.len() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "exemption mask", expected: dataset.d(), got: exempt.len() });
    }
    let grad = if exempt.iter().any(|&e| e) {
        let huge = PenaltySpec::lasso(f64::MAX, dataset.d())?.with_exempt(exempt.to_vec())?;
        let fit = lasso_em(Problem::new(dataset), &huge, LassoSolver::Cd, &DVector::zeros(dataset.d()), 1e-10, 10_000)?;
        Problem::new(dataset).gradient(&dataset.psi(&fit.beta_hat)?)
    } else {
        dataset.x().tr_mul(&kappa(dataset))
    };
    Ok((0..dataset.d()).filter(|&j| !exempt[j]).map(|j| grad[j].abs()).fold(0.0, f64::max))
}

/// `points` values log-spaced from `lambda_max` down to `ratio * lambda_max`.
pub fn default_grid(lambda_max: f64, points: usize, ratio: f64) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || points == 0 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain("grid needs lambda_max > 0, points >= 1, ratio in (0, 1)".into()));
    }
    if points == 1 {
        return Ok(vec![lambda_max]);
    }
    let step = ratio.ln() / (points - 1) as f64;
    Ok((0..points).map(|i| lambda_max * (step * i as f64).exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathMethod {
    IrlsCd,
    DaCd,
    DaCg,
    Bridge { alpha: f64 },
}

impl PathMethod {
    pub fn algorithm(self) -> Algorithm {
        match self {
            PathMethod::IrlsCd => Algorithm::IrlsCd,
            PathMethod::DaCd => Algorithm::DaCd,
            PathMethod::DaCg => Algorithm::DaCg,
            PathMethod::Bridge { .. } => Algorithm::Bridge,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathOptions {
    pub method: PathMethod,
    pub exempt: Vec<bool>,
    pub warm_start: bool,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub method: PathMethod,
    pub lambdas: Vec<f64>,
    /// One row per grid point.
    pub betas: DMatrix<f64>,
    /// Penalized negative log likelihood per grid point.
    pub objectives: Vec<f64>,
    /// Nonzero penalized coefficients per grid point.
    pub nonzero_counts: Vec<usize>,
    pub converged: Vec<bool>,
    /// Grid points whose fit failed, with the error message.
    pub failures: Vec<(usize, String)>,
}

impl PathResult {
    /// CSV with columns `lambda, objective, nnz, beta1..betad`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.betas.ncols();
        let mut header = vec!["lambda".to_string(), "objective".into(), "nnz".into()];
        header.extend((1..=d).map(|j| format!("beta{j}")));
        w.write_record(&header)?;
        for (i, &lam) in self.lambdas.iter().enumerate() {
            let mut row = vec![crate::io::fmt_float(lam), crate::io::fmt_float(self.objectives[i]), self.nonzero_counts[i].to_string()];
            row.extend(self.betas.row(i).iter().map(|&b| crate::io::fmt_float(b)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits the chosen method along a strictly decreasing λ grid.
pub fn solution_path(dataset: &Dataset, grid: &[f64], opts: &PathOptions) -> Result<PathResult> {
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0)) || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("λ grid must be positive and strictly decreasing".into()));
    }
    let d = dataset.d();
    let base = match opts.method {
        PathMethod::Bridge { alpha } => PenaltySpec::bridge(grid[0], alpha, d)?,
        _ => PenaltySpec::lasso(grid[0], d)?,
    }
    .with_exempt(opts.exempt.clone())?;
    let mut betas = DMatrix::from_element(grid.len(), d, f64::NAN);
    let mut objectives = vec![f64::NAN; grid.len()];
    let mut nonzero_counts = vec![0; grid.len()];
    let mut conv = vec![false; grid.len()];
    let mut failures = Vec::new();
    let mut start = DVector::zeros(d);
    for (i, &lam) in grid.iter().enumerate() {
        let pen = base.with_lambda(lam)?;
        let beta0 = if opts.warm_start { start.clone() } else { DVector::zeros(d) };
        let fit = match opts.method {
            PathMethod::IrlsCd => fit_irls_cd_from(dataset, &pen, &beta0, opts.tol, opts.max_iter),
            PathMethod::DaCd => fit_lasso_em_from(dataset, &pen, LassoSolver::Cd, &beta0, opts.tol, opts.max_iter),
            PathMethod::DaCg => fit_lasso_em_from(dataset, &pen, LassoSolver::Cg, &beta0, opts.tol, opts.max_iter),
            PathMethod::Bridge { .. } => {
                if opts.warm_start && i > 0 {
                    fit_bridge_em_from(dataset, &pen, &beta0, opts.tol, opts.max_iter)
                } else {
                    fit_bridge_em(dataset, &pen, opts.tol, opts.max_iter)
                }
            }
        };
        match fit.and_then(|f| Ok((penalized_objective(dataset, &f.beta_hat, &pen)?, f))) {
            Ok((obj, f)) => {
                betas.set_row(i, &f.beta_hat.transpose());
                objectives[i] = obj;
                nonzero_counts[i] = (0..d).filter(|&j| !opts.exempt[j] && f.beta_hat[j] != 0.0).count();
                conv[i] = f.converged;
                start = f.beta_hat;
            }
            Err(e) => {
                log::warn!("path point {i} (lambda {lam:e}) failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    Ok(PathResult { method: opts.method, lambdas: grid.to_vec(), betas, objectives, nonzero_counts, converged: conv, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::fit_em;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let beta = DVector::from_fn(d, |j, _| if j < 2 { 1.5 } else if j == 2 { -1.0 } else { 0.0 });
        let psi = &x * &beta;
        let y = DVector::from_fn(n, |t, _| if rng.random::<f64>() < sigmoid(psi[t]) { 1.0 } else { 0.0 });
        Dataset::bernoulli(y, x).unwrap()
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.5, 0.0), -2.5);
        assert_eq!(soft_threshold(-2.5, 1.0), -1.5);
    }

    #[test]
    fn cd_update_orthogonal_column() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let w = DVector::from_element(4, 1.0);
        let z = DVector::from_vec(vec![2.0, -2.0, 1.0, -1.0]);
        let b = DVector::zeros(1);
        // least squares gives 1.5 with x^T x = 4, so the penalized step is S(6, λ)/4
        assert!((cd_update(0, &w, &z, &x, &b, 0.0) - 1.5).abs() < 1e-15);
        assert!((cd_update(0, &w, &z, &x, &b, 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(cd_update(0, &w, &z, &x, &b, 7.0), 0.0);
        let zero_w = DVector::zeros(4);
        let b = DVector::from_element(1, 0.3);
        assert_eq!(cd_update(0, &zero_w, &z, &x, &b, 1.0), 0.3);
    }

    fn pen_quadratic(x: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>, b: &DVector<f64>, lam: f64) -> f64 {
        let r = z - x * b;
        0.5 * r.iter().zip(w.iter()).map(|(ri, wi)| wi * ri * ri).sum::<f64>() + lam * b.abs().sum()
    }

    #[test]
    fn cd_sweep_decreases_penalized_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(30, 5, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(30, |_, _| rng.random_range(0.1..1.0));
        let z = DVector::from_fn(30, |_, _| rng.random_range(-2.0..2.0));
        let mut b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let mut prev = pen_quadratic(&x, &w, &z, &b, 0.7);
        for _ in 0..5 {
            for j in 0..5 {
                b[j] = cd_update(j, &w, &z, &x, &b, 0.7);
            }
            let now = pen_quadratic(&x, &w, &z, &b, 0.7);
            assert!(now <= prev + 1e-12);
            prev = now;
        }
        let mut fast = DVector::zeros(5);
        cd_solve(&x, &w, &z, &mut fast, &[0.7; 5], 1e-13, 10_000);
        assert!(pen_quadratic(&x, &w, &z, &fast, 0.7) <= prev + 1e-12);
    }

    #[test]
    fn weight_examples() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let ds = Dataset::bernoulli(DVector::from_vec(vec![1.0, 0.0]), x).unwrap();
        let (w, z) = irls_weights(&ds, &DVector::zeros(1)).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.25]);
        assert_eq!(z.as_slice(), &[2.0, -2.0]);
        let (o, z) = da_weights(&ds, &DVector::zeros(1)).unwrap();
        assert!((o[0] - 0.25).abs() < 1e-15);
        assert!((z[0] - 2.0).abs() < 1e-12 && (z[1] + 2.0).abs() < 1e-12);
        let (_, z2) = da_weights_doubled(&ds, &DVector::zeros(1)).unwrap();
        assert!((z2[0] - 4.0).abs() < 1e-12 && (z2[1] + 4.0).abs() < 1e-12);

        let (w, z) = irls_weights(&ds, &DVector::from_element(1, 30.0)).unwrap();
        let floor = IRLS_PROB_FLOOR * (1.0 - IRLS_PROB_FLOOR);
        assert!((w[0] / floor - 1.0).abs() < 1e-6 && z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn da_weights_decay_slower_than_irls() {
        let x = DMatrix::from_column_slice(1, 1, &[1.0]);
        let ds = Dataset::bernoulli(DVector::from_vec(vec![1.0]), x).unwrap();
        let mut last_ratio = 0.0;
        for k in 0..=40 {
            let psi = k as f64 * 0.5;
            let (w, _) = irls_weights(&ds, &DVector::from_element(1, psi)).unwrap();
            let (o, _) = da_weights(&ds, &DVector::from_element(1, psi)).unwrap();
            assert!(o[0] <= 0.25 + 1e-15 && w[0] <= 0.25 + 1e-15);
            assert!(o[0] >= w[0] - 1e-15);
            let ratio = o[0] / w[0];
            assert!(ratio >= last_ratio - 1e-12);
            last_ratio = ratio;
            if psi > 2.0 {
                assert!((o[0] * 2.0 * psi - (psi / 2.0).tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn da_quadratic_matches_complete_data_form() {
        let ds = instance(4, 25, 3);
        let b0 = DVector::from_vec(vec![0.4, -0.3, 0.2]);
        let (o, z) = da_weights(&ds, &b0).unwrap();
        let k = kappa(&ds);
        let f = |b: &DVector<f64>| {
            let psi = ds.x() * b;
            let working = -0.5 * (0..25).map(|t| o[t] * (z[t] - psi[t]).powi(2)).sum::<f64>();
            let complete = (0..25).map(|t| k[t] * psi[t] - 0.5 * o[t] * psi[t] * psi[t]).sum::<f64>();
            working - complete
        };
        let c0 = f(&b0);
        for s in 0..4 {
            let b = DVector::from_fn(3, |j, _| (s * 3 + j) as f64 * 0.1 - 0.5);
            assert!((f(&b) - c0).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_lambda_zeroes_everything() {
        let ds = instance(5, 100, 4);
        let pen = PenaltySpec::lasso(1e3, 4).unwrap();
        for solver in [LassoSolver::Cd, LassoSolver::Cg] {
            let r = fit_lasso_em(&ds, &pen, solver, 1e-8, 1000).unwrap();
            assert!(r.converged);
            assert!(r.beta_hat.iter().all(|b| b.abs() < 1e-8));
        }
    }

    #[test]
    fn tiny_lambda_approaches_unpenalized_mode() {
        let ds = instance(6, 300, 3);
        let prior = GaussianPrior::isotropic(3, 1e-12).unwrap();
        let em = fit_em(&ds, &prior, &DVector::zeros(3), 1e-10, 10_000).unwrap();
        let pen = PenaltySpec::lasso(1e-6, 3).unwrap();
        for solver in [LassoSolver::Cd, LassoSolver::Cg] {
            let r = fit_lasso_em(&ds, &pen, solver, 1e-9, 10_000).unwrap();
            assert!(r.converged, "{solver:?}");
            assert!((&r.beta_hat - &em.beta_hat).amax() < 1e-4);
        }
    }

    /// Bisection on the one-dimensional stationarity condition.
    fn lasso_1d_oracle(ds: &Dataset, lam: f64) -> f64 {
        let g = |b: f64| Problem::new(ds).gradient(&ds.psi(&DVector::from_element(1, b)).unwrap())[0];
        let g0 = g(0.0);
        if g0.abs() <= lam {
            return 0.0;
        }
        let s = g0.signum();
        let (mut lo, mut hi) = (0.0, 50.0 * s);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) - lam * s > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn one_dimensional_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(80, 1, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let y = DVector::from_fn(80, |t, _| if rng.random::<f64>() < sigmoid(0.8 * x[(t, 0)]) { 1.0 } else { 0.0 });
        let ds = Dataset::bernoulli(y, x).unwrap();
        for lam in [0.5, 3.0, 10.0, 100.0] {
            let want = lasso_1d_oracle(&ds, lam);
            let pen = PenaltySpec::lasso(lam, 1).unwrap();
            for solver in [LassoSolver::Cd, LassoSolver::Cg] {
                let r = fit_lasso_em(&ds, &pen, solver, 1e-10, 10_000).unwrap();
                assert!((r.beta_hat[0] - want).abs() < 1e-7, "{lam} {solver:?}: {} vs {want}", r.beta_hat[0]);
            }
        }
    }

    #[test]
    fn lasso_em_is_monotone_and_stationary() {
        let ds = instance(8, 200, 6);
        let pen = PenaltySpec::lasso(4.0, 6).unwrap();
        for solver in [LassoSolver::Cd, LassoSolver::Cg] {
            let r = fit_lasso_em(&ds, &pen, solver, 1e-8, 10_000).unwrap();
            assert!(r.converged);
            assert!(r.grad_norm <= 1e-7);
            for w in r.trace.windows(2) {
                assert!(w[1].objective <= w[0].objective + 1e-10 * w[0].objective.abs());
            }
        }
    }

    #[test]
    fn irls_agrees_with_da_on_mild_problem() {
        let ds = instance(9, 200, 5);
        let pen = PenaltySpec::lasso(3.0, 5).unwrap();
        let da = fit_lasso_em(&ds, &pen, LassoSolver::Cd, 1e-9, 10_000).unwrap();
        let ir = fit_irls_cd(&ds, &pen, 1e-9, 200).unwrap();
        assert!(ir.converged && !ir.diverged);
        assert!((da.beta_hat - ir.beta_hat).amax() < 1e-4);
    }

    #[test]
    fn irls_without_penalty_is_plain_irls() {
        let ds = instance(10, 200, 3);
        let prior = GaussianPrior::isotropic(3, 1e-14).unwrap();
        let em = fit_em(&ds, &prior, &DVector::zeros(3), 1e-10, 10_000).unwrap();
        let ir = fit_irls_cd(&ds, &PenaltySpec::none(3), 1e-10, 100).unwrap();
        assert!((em.beta_hat - ir.beta_hat).amax() < 1e-6);
    }

    #[test]
    fn bridge_precision_example() {
        assert!((bridge_precision(1.0, 0.5, 4.0) - 0.0625).abs() < 1e-15);
        assert!((bridge_precision(1.0, 0.5, -4.0) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn bridge_is_monotone_and_sign_equivariant() {
        let ds = instance(11, 150, 5);
        let pen = PenaltySpec::bridge(2.0, 0.5, 5).unwrap();
        let r = fit_bridge_em(&ds, &pen, 1e-9, 2000).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-8 * w[0].objective.abs());
        }
        let flipped = Dataset::bernoulli(ds.y().map(|v| 1.0 - v), -ds.x()).unwrap();
        let s = fit_bridge_em(&flipped, &pen, 1e-9, 2000).unwrap();
        assert!((r.beta_hat - s.beta_hat).amax() < 1e-8);
    }

    #[test]
    fn path_examples() {
        let ds = instance(12, 150, 6);
        let lmax = lambda_max(&ds, &[false; 6]).unwrap();
        let grid = default_grid(lmax * 1.01, 15, 1e-2).unwrap();
        let opts = PathOptions { method: PathMethod::DaCd, exempt: vec![false; 6], warm_start: true, tol: 1e-9, max_iter: 10_000 };
        let warm = solution_path(&ds, &grid, &opts).unwrap();
        assert_eq!(warm.nonzero_counts[0], 0);
        assert!(warm.betas.row(0).iter().all(|&b| b == 0.0));
        let cold = solution_path(&ds, &grid, &PathOptions { warm_start: false, ..opts.clone() }).unwrap();
        for i in 0..grid.len() {
            assert!(warm.objectives[i] <= cold.objectives[i] + 1e-6);
        }
        let mut buf = Vec::new();
        warm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), grid.len() + 1);
        assert!(text.starts_with("lambda,objective,nnz,beta1"));
        assert!(solution_path(&ds, &[1.0, 2.0], &opts).is_err());
    }

    #[test]
    fn lambda_max_with_intercept() {
        let mut ds = instance(13, 120, 3);
        let mut x = ds.x().clone();
        x.set_column(0, &DVector::from_element(120, 1.0));
        ds = Dataset::bernoulli(ds.y().clone(), x).unwrap();
        let exempt = vec![true, false, false];
        assert_eq!(intercept_columns(ds.x()), exempt);
        let lmax = lambda_max(&ds, &exempt).unwrap();
        let pen = PenaltySpec::lasso(lmax * 1.0001, 3).unwrap().exempt_intercepts(ds.x()).unwrap();
        let r = fit_lasso_em(&ds, &pen, LassoSolver::Cd, 1e-9, 10_000).unwrap();
        assert!(r.beta_hat[1].abs() < 1e-8 && r.beta_hat[2].abs() < 1e-8);
        let ybar = ds.y().mean();
        assert!((r.beta_hat[0] - (ybar / (1.0 - ybar)).ln()).abs() < 1e-6);
    }
}
