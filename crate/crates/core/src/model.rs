//! Data containers, the Gaussian prior, and the exact observed-data log
//! posterior of binomial / negative-binomial logistic regression.
//!
//! Objectives are reported without the beta-independent binomial and
//! `2^{-m}` constants.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linsolve::{cholesky, solve_direct, SpdSystem};

/// Counts, trials and dense design for a logistic-family regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    m: DVector<f64>,
    x: DMatrix<f64>,
}

impl Dataset {
    /// Binomial data: `0 <= y_t <= m_t`, `m_t > 0`.
    pub fn new(y: DVector<f64>, m: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("design needs at least one column".into()));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch { what: "y length", expected: n, got: y.len() });
        }
        if m.len() != n {
            return Err(Error::DimensionMismatch { what: "m length", expected: n, got: m.len() });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite design entry {v}")));
        }
        for t in 0..n {
            let (yt, mt) = (y[t], m[t]);
            if !yt.is_finite() || !mt.is_finite() || !(mt > 0.0) || yt < 0.0 || yt > mt {
                return Err(Error::InvalidInput(format!(
                    "row {t}: need 0 <= y <= m and m > 0, got y = {yt}, m = {mt}"
                )));
            }
        }
        Ok(Self { y, m, x })
    }

    /// Negative-binomial counts with overdispersion `r`: trials are `y_t + r`.
    pub fn negative_binomial(y: DVector<f64>, r: f64, x: DMatrix<f64>) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidInput(format!("overdispersion must be positive, got {r}")));
        }
        let m = y.map(|v| v + r);
        Self::new(y, m, x)
    }

    /// Bernoulli responses (`m_t = 1`).
    pub fn bernoulli(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let m = DVector::from_element(y.len(), 1.0);
        Self::new(y, m, x)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn m(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Linear predictors `X beta`.
    pub fn psi(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("beta", self.d(), beta.len())?;
        Ok(&self.x * beta)
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = self.x.select_rows(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        let m = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.m[i]));
        Dataset { y, m, x }
    }

    pub fn is_bernoulli(&self) -> bool {
        self.m.iter().all(|&v| v == 1.0)
    }
}

/// `kappa_t = y_t - m_t / 2`.
pub fn kappa(dataset: &Dataset) -> DVector<f64> {
    dataset.y.zip_map(&dataset.m, |y, m| y - 0.5 * m)
}

/// Normal prior on beta stored by its precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mu: DVector<f64>,
    precision: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mu: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::DimensionMismatch { what: "prior precision", expected: d, got: precision.nrows() });
        }
        let scale = precision.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (precision[(i, j)] - precision[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!("prior precision not symmetric at ({i}, {j})")));
                }
            }
        }
        cholesky(&precision)?;
        Ok(Self { mu, precision })
    }

    /// Mean-zero prior with precision `tau * I`.
    pub fn isotropic(d: usize, tau: f64) -> Result<Self> {
        Self::new(DVector::zeros(d), DMatrix::from_diagonal_element(d, d, tau))
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `Sigma^{-1} mu`.
    pub fn precision_mean(&self) -> DVector<f64> {
        &self.precision * &self.mu
    }

    /// Prior covariance (inverse precision).
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        crate::linsolve::spd_inverse(&self.precision)
    }
}

/// Value, gradient, and optionally the Hessian of the log posterior.
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub log_posterior: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

fn check_prior(dataset: &Dataset, prior: &GaussianPrior) -> Result<()> {
    check_len("prior dimension", dataset.d(), prior.d())
}

/// Log likelihood `sum_t y_t psi_t - m_t softplus(psi_t)` at given predictors.
pub fn log_likelihood_at(dataset: &Dataset, psi: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for t in 0..dataset.n() {
        acc += dataset.y[t] * psi[t] - dataset.m[t] * softplus(psi[t]);
    }
    acc
}

pub fn log_likelihood(dataset: &Dataset, beta: &DVector<f64>) -> Result<f64> {
    let psi = dataset.psi(beta)?;
    Ok(log_likelihood_at(dataset, &psi))
}

fn log_prior(prior: &GaussianPrior, beta: &DVector<f64>) -> (f64, DVector<f64>) {
    let diff = beta - &prior.mu;
    let pd = &prior.precision * &diff;
    (-0.5 * diff.dot(&pd), -pd)
}

/// Log posterior value only.
pub fn log_posterior_value(dataset: &Dataset, prior: &GaussianPrior, beta: &DVector<f64>) -> Result<f64> {
    check_prior(dataset, prior)?;
    let ll = log_likelihood(dataset, beta)?;
    Ok(ll + log_prior(prior, beta).0)
}

/// Gradient of the log likelihood: `X^T (y - m * sigma(psi))`.
pub fn log_likelihood_gradient(dataset: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let psi = dataset.psi(beta)?;
    let resid = DVector::from_fn(dataset.n(), |t, _| dataset.y[t] - dataset.m[t] * sigmoid(psi[t]));
    Ok(dataset.x.tr_mul(&resid))
}

/// Log posterior and its gradient.
pub fn log_posterior(dataset: &Dataset, prior: &GaussianPrior, beta: &DVector<f64>) -> Result<ObjectiveReport> {
    evaluate(dataset, prior, beta, false)
}

/// Log posterior, gradient and Hessian `-(X^T W X + Sigma^{-1})`.
pub fn log_posterior_with_hessian(
    dataset: &Dataset,
    prior: &GaussianPrior,
    beta: &DVector<f64>,
) -> Result<ObjectiveReport> {
    evaluate(dataset, prior, beta, true)
}

fn evaluate(dataset: &Dataset, prior: &GaussianPrior, beta: &DVector<f64>, hessian: bool) -> Result<ObjectiveReport> {
    check_prior(dataset, prior)?;
    let psi = dataset.psi(beta)?;
    let n = dataset.n();
    let mut resid = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for t in 0..n {
        let s = sigmoid(psi[t]);
        resid[t] = dataset.y[t] - dataset.m[t] * s;
        w[t] = dataset.m[t] * s * (1.0 - s);
    }
    let (lp, gp) = log_prior(prior, beta);
    let log_posterior = log_likelihood_at(dataset, &psi) + lp;
    let gradient = dataset.x.tr_mul(&resid) + gp;
    let hessian = hessian.then(|| -(weighted_gram(&dataset.x, &w) + &prior.precision));
    Ok(ObjectiveReport { log_posterior, gradient, hessian })
}

/// `X^T diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut wx = x.clone();
    for mut col in wx.column_iter_mut() {
        col.component_mul_assign(w);
    }
    // an explicit transpose lets the product go through the blocked gemm kernel
    let mut g = x.transpose() * &wx;
    // symmetrize away rounding asymmetry from the product
    let d = g.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Mean negative log likelihood per trial; the held-out log-loss.
pub fn mean_log_loss(dataset: &Dataset, beta: &DVector<f64>) -> Result<f64> {
    let total_m: f64 = dataset.m.sum();
    if total_m <= 0.0 {
        return Ok(0.0);
    }
    Ok(-log_likelihood(dataset, beta)? / total_m)
}

/// Options for the damped-Newton reference optimizer.
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500, max_halvings: 20 }
    }
}

/// Posterior mode by damped Newton on the exact log posterior.
///
/// Accepted steps never decrease the objective beyond rounding. Fails with
/// [`Error::NoConvergence`] carrying the last iterate.
pub fn oracle_mode(dataset: &Dataset, prior: &GaussianPrior, beta0: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    oracle_mode_with(dataset, prior, beta0, OracleOptions { tol, ..Default::default() })
}

pub fn oracle_mode_with(
    dataset: &Dataset,
    prior: &GaussianPrior,
    beta0: &DVector<f64>,
    opts: OracleOptions,
) -> Result<DVector<f64>> {
    if !(opts.tol > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    check_prior(dataset, prior)?;
    check_len("beta0", dataset.d(), beta0.len())?;
    let mut beta = beta0.clone();
    let mut report = log_posterior_with_hessian(dataset, prior, &beta)?;
    for _ in 0..opts.max_iter {
        if report.gradient.amax() <= opts.tol {
            return Ok(beta);
        }
        let neg_hess = -report.hessian.take().expect("hessian requested");
        let step = solve_direct(&SpdSystem::new(neg_hess, report.gradient.clone())?)?;
        let mut scale = 1.0;
        let mut accepted = None;
        let slack = 64.0 * f64::EPSILON * report.log_posterior.abs();
        for _ in 0..=opts.max_halvings {
            let trial = &beta + &step * scale;
            let next = log_posterior_with_hessian(dataset, prior, &trial)?;
            // near the mode value changes drown in rounding; fall back on the gradient
            let ascends = next.log_posterior >= report.log_posterior
                || (next.log_posterior >= report.log_posterior - slack
                    && next.gradient.amax() < report.gradient.amax());
            if ascends {
                accepted = Some((trial, next));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((next, next_report)) => {
                beta = next;
                report = next_report;
            }
            None => break,
        }
    }
    if report.gradient.amax() <= opts.tol {
        return Ok(beta);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        grad_norm: report.gradient.amax(),
        last: beta.iter().copied().collect(),
    })
}
