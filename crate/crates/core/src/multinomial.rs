//! K-class logistic regression: block-cycling ECM through the binary
//! Polya-Gamma machinery, and a penalized partial-IRLS baseline.
//!
//! Columns of a [`CoefBlock`] are classes and are indexed from 0 here, so the
//! reference class of the ECM parameterization is column 0.

use nalgebra::{DMatrix, DVector};

use crate::em::TraceEntry;
use crate::error::{Error, Result};
use crate::model::{softplus, Dataset};
use crate::sparse::{irls_cd, lasso_em_step, LassoSolver, PenaltyFamily, PenaltySpec, Problem};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl MultiDataset {
    /// `y` is an N×K indicator matrix with one 1 per row.
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.ncols() < 2 {
            return Err(Error::InvalidInput(format!("need at least two classes, got {}", y.ncols())));
        }
        if y.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch { what: "rows of X", expected: y.nrows(), got: x.nrows() });
        }
        for (t, row) in y.row_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0 && v != 1.0) || row.sum() != 1.0 {
                return Err(Error::InvalidInput(format!("indicator row {t} must contain exactly one 1")));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite entries".into()));
        }
        Ok(Self { y, x })
    }

    /// From 1-based class labels in `1..=k`.
    pub fn from_labels(labels: &[usize], k: usize, x: DMatrix<f64>) -> Result<Self> {
        let mut y = DMatrix::zeros(labels.len(), k);
        for (t, &l) in labels.iter().enumerate() {
            if l == 0 || l > k {
                return Err(Error::InvalidInput(format!("label {l} at row {t} outside 1..={k}")));
            }
            y[(t, l - 1)] = 1.0;
        }
        Self::new(y, x)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// 1-based labels.
    pub fn labels(&self) -> Vec<usize> {
        self.y.row_iter().map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0) + 1).collect()
    }

    /// Binary dataset for "class `k` vs the rest".
    pub fn binary(&self, k: usize) -> Result<Dataset> {
        Dataset::bernoulli(self.y.column(k).into_owned(), self.x.clone())
    }
}

/// `d×K` coefficient matrix, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefBlock {
    pub b: DMatrix<f64>,
}

impl CoefBlock {
    pub fn zeros(d: usize, k: usize) -> Self {
        Self { b: DMatrix::zeros(d, k) }
    }

    /// Subtract each row's median across classes.
    pub fn recenter_median(&mut self) {
        for mut row in self.b.row_iter_mut() {
            let mut v: Vec<f64> = row.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            for e in row.iter_mut() {
                *e -= med;
            }
        }
    }
}

fn linear(b: &CoefBlock, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.b.nrows() != x.ncols() {
        return Err(Error::DimensionMismatch { what: "coefficient rows", expected: x.ncols(), got: b.b.nrows() });
    }
    Ok(x * &b.b)
}

/// Softmax class probabilities, N×K.
pub fn class_probs(b: &CoefBlock, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut eta = linear(b, x)?;
    for mut row in eta.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(eta)
}

fn log_sum_exp_except(row: impl Iterator<Item = f64> + Clone, skip: usize) -> f64 {
    let mx = row.clone().enumerate().filter(|&(l, _)| l != skip).map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.enumerate().filter(|&(l, _)| l != skip).map(|(_, v)| (v - mx).exp()).sum();
    mx + s.ln()
}

/// `c_tk = log sum_{l != k} exp(x_t^T beta_l)`.
pub fn conditional_offset(b: &CoefBlock, k: usize, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if b.b.ncols() < 2 || k >= b.b.ncols() {
        return Err(Error::InvalidInput(format!("class index {k} invalid for K = {}", b.b.ncols())));
    }
    let eta = linear(b, x)?;
    Ok(offset_from_eta(&eta, k))
}

fn offset_from_eta(eta: &DMatrix<f64>, k: usize) -> DVector<f64> {
    DVector::from_fn(eta.nrows(), |t, _| log_sum_exp_except(eta.row(t).iter().copied(), k))
}

/// Multinomial log likelihood `sum_t log theta_{t, y_t}`.
pub fn multinomial_loglik(data: &MultiDataset, b: &CoefBlock) -> Result<f64> {
    let eta = linear(b, &data.x)?;
    let mut ll = 0.0;
    for t in 0..data.n() {
        let row = eta.row(t);
        let mx = row.max();
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        ll += data.y.row(t).dot(&row) - lse;
    }
    Ok(ll)
}

/// Gradient of [`multinomial_loglik`], `X^T (Y - Theta)`.
pub fn multinomial_gradient(data: &MultiDataset, b: &CoefBlock) -> Result<DMatrix<f64>> {
    let theta = class_probs(b, &data.x)?;
    Ok(data.x.tr_mul(&(&data.y - theta)))
}

fn block_penalty(b: &CoefBlock, penalty: &PenaltySpec, classes: std::ops::Range<usize>) -> f64 {
    classes.map(|k| penalty.value(&b.b.column(k).into_owned())).sum()
}

/// Penalized multinomial log likelihood with the ECM parameterization: the
/// penalty covers classes 1..K (column 0 is the zero reference).
pub fn multinomial_objective(data: &MultiDataset, b: &CoefBlock, penalty: &PenaltySpec) -> Result<f64> {
    Ok(multinomial_loglik(data, b)? - block_penalty(b, penalty, 1..b.b.ncols()))
}

/// Penalized multinomial log likelihood with every class penalized, the
/// objective of the symmetric (median-recentered) parameterization.
pub fn symmetric_objective(data: &MultiDataset, b: &CoefBlock, penalty: &PenaltySpec) -> Result<f64> {
    Ok(multinomial_loglik(data, b)? - block_penalty(b, penalty, 0..b.b.ncols()))
}

/// Penalized one-vs-rest product `sum_tk [Y log theta + (1 - Y) log(1 - theta)]`
/// over classes 1..K. This is the product form written for the block
/// derivation; it is not the likelihood the ECM blocks optimise.
pub fn one_vs_rest_objective(data: &MultiDataset, b: &CoefBlock, penalty: &PenaltySpec) -> Result<f64> {
    let eta = linear(b, &data.x)?;
    let mut ll = 0.0;
    for t in 0..data.n() {
        for k in 0..data.k() {
            // psi = eta_k - c_k gives log theta = -softplus(-psi), log(1 - theta) = -softplus(psi)
            let psi = eta[(t, k)] - log_sum_exp_except(eta.row(t).iter().copied(), k);
            ll -= if data.y[(t, k)] == 1.0 { softplus(-psi) } else { softplus(psi) };
        }
    }
    Ok(ll - block_penalty(b, penalty, 1..b.b.ncols()))
}

/// Result of a multinomial fit. `trace` records the penalized log
/// likelihood (which should rise) after every block update.
#[derive(Debug, Clone)]
pub struct MultiFit {
    pub coef: CoefBlock,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
}

fn check_penalty(data: &MultiDataset, penalty: &PenaltySpec) -> Result<()> {
    if penalty.d() != data.d() {
        return Err(Error::DimensionMismatch { what: "penalty mask", expected: data.d(), got: penalty.d() });
    }
    if matches!(penalty.family(), PenaltyFamily::Bridge { .. }) {
        return Err(Error::Domain("multinomial fits support lasso or no penalty".into()));
    }
    Ok(())
}

/// ECM with the first class fixed at zero; classes 1..K are updated in
/// order, one Polya-Gamma EM step per block.
pub fn fit_ecm(data: &MultiDataset, penalty: &PenaltySpec, tol: f64, max_iter: usize) -> Result<MultiFit> {
    fit_ecm_with(data, penalty, LassoSolver::Cg, tol, max_iter)
}

pub fn fit_ecm_with(data: &MultiDataset, penalty: &PenaltySpec, solver: LassoSolver, tol: f64, max_iter: usize) -> Result<MultiFit> {
    check_penalty(data, penalty)?;
    let (d, kk) = (data.d(), data.k());
    let binaries: Vec<Dataset> = (0..kk).map(|k| data.binary(k)).collect::<Result<_>>()?;
    let mut coef = CoefBlock::zeros(d, kk);
    let mut trace = vec![TraceEntry { iteration: 0, objective: multinomial_objective(data, &coef, penalty)?, step_norm: 0.0 }];
    let inner_tol = (tol * 1e-2).max(1e-14);
    let mut iter = 0;
    let mut converged = false;
    while iter < max_iter {
        iter += 1;
        let mut change: f64 = 0.0;
        for k in 1..kk {
            let eta = &data.x * &coef.b;
            let offset = -offset_from_eta(&eta, k);
            let prob = Problem { ds: &binaries[k], offset: Some(&offset) };
            let beta = coef.b.column(k).into_owned();
            let psi = prob.psi(&beta);
            let next = lasso_em_step(prob, penalty, solver, &beta, &psi, inner_tol)?;
            change = change.max((&next - &beta).amax());
            coef.b.set_column(k, &next);
            trace.push(TraceEntry { iteration: iter, objective: multinomial_objective(data, &coef, penalty)?, step_norm: change });
        }
        if change <= tol {
            converged = true;
            break;
        }
    }
    Ok(MultiFit { coef, trace, iterations: iter, converged, diverged: false })
}

/// Penalized partial IRLS over all K classes, each block solved by
/// coordinate descent on its quadratic approximation, followed by median
/// recentering of every coefficient row.
pub fn fit_partial_irls(data: &MultiDataset, penalty: &PenaltySpec, tol: f64, max_iter: usize) -> Result<MultiFit> {
    check_penalty(data, penalty)?;
    let (d, kk) = (data.d(), data.k());
    let binaries: Vec<Dataset> = (0..kk).map(|k| data.binary(k)).collect::<Result<_>>()?;
    let mut coef = CoefBlock::zeros(d, kk);
    let mut obj = symmetric_objective(data, &coef, penalty)?;
    let mut trace = vec![TraceEntry { iteration: 0, objective: obj, step_norm: 0.0 }];
    let mut best = (coef.clone(), obj);
    let (mut worse_run, mut diverged, mut converged) = (0, false, false);
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let before = coef.b.clone();
        for k in 0..kk {
            let eta = &data.x * &coef.b;
            let offset = -offset_from_eta(&eta, k);
            let prob = Problem { ds: &binaries[k], offset: Some(&offset) };
            let beta = coef.b.column(k).into_owned();
            // a single outer IRLS step on this block
            let step = irls_cd(prob, penalty, &beta, 0.0, 1)?;
            coef.b.set_column(k, &step.beta_hat);
        }
        coef.recenter_median();
        let change = (&coef.b - before).amax();
        let new_obj = symmetric_objective(data, &coef, penalty)?;
        trace.push(TraceEntry { iteration: iter, objective: new_obj, step_norm: change });
        worse_run = if !new_obj.is_finite() || new_obj < obj { worse_run + 1 } else { 0 };
        obj = new_obj;
        if obj >= best.1 {
            best = (coef.clone(), obj);
        }
        if worse_run >= crate::sparse::IRLS_DIVERGENCE_RUN {
            log::warn!("partial IRLS objective worsened {} cycles running; stopping", worse_run);
            diverged = true;
            break;
        }
        if change <= tol {
            converged = true;
            break;
        }
    }
    Ok(MultiFit { coef: best.0, trace, iterations: iter, converged, diverged })
}
