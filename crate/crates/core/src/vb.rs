//! Jaakkola-Jordan variational Bayes for logistic-family regression.
//!
//! The quadratic lower bound on each likelihood term has the same kernel as
//! the EM complete-data likelihood, with weights evaluated at the variational
//! parameter `xi_t` instead of the current linear predictor.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};

use crate::em::{omega_from_psi, Algorithm, FitReport, TraceEntry};
use crate::error::{Error, Result};
use crate::linsolve::{cholesky, cholesky_solve, spd_inverse};
use crate::model::{kappa, weighted_gram, Dataset, GaussianPrior};
use crate::pg_math::{log_cosh, tanh_ratio};

/// Floor added to the initial `|x_t^T mu|`.
pub const XI_INIT_FLOOR: f64 = 1e-6;

/// Variational posterior `N(m, V)` together with the bound parameters.
#[derive(Debug, Clone)]
pub struct VbState {
    pub m: DVector<f64>,
    pub v: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub elbo: f64,
}

/// Optimal dual variable `tanh(psi/2) / (4 psi)`, equal to 1/8 at zero.
pub fn lambda_hat(psi: f64) -> f64 {
    0.5 * tanh_ratio(psi)
}

/// `xi_t = sqrt(x_t^T V x_t + (x_t^T m)^2)`.
pub fn xi_update(dataset: &Dataset, m: &DVector<f64>, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = dataset.d();
    if m.len() != d {
        return Err(Error::DimensionMismatch { what: "variational mean", expected: d, got: m.len() });
    }
    if v.nrows() != d || v.ncols() != d {
        return Err(Error::DimensionMismatch { what: "variational covariance", expected: d, got: v.nrows() });
    }
    let x = dataset.x();
    let xv = x * v;
    let mean = x * m;
    Ok(DVector::from_fn(dataset.n(), |t, _| {
        let quad = xv.row(t).dot(&x.row(t)).max(0.0);
        (quad + mean[t] * mean[t]).sqrt()
    }))
}

struct Bound {
    m: DVector<f64>,
    v: DMatrix<f64>,
    elbo: f64,
}

fn bound_at(dataset: &Dataset, prior: &GaussianPrior, xi: &DVector<f64>) -> Result<Bound> {
    if xi.len() != dataset.n() {
        return Err(Error::DimensionMismatch { what: "xi length", expected: dataset.n(), got: xi.len() });
    }
    if prior.d() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "prior dimension", expected: dataset.d(), got: prior.d() });
    }
    if let Some(v) = xi.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("xi must be non-negative and finite, got {v}")));
    }
    let omega = omega_from_psi(dataset.m(), xi);
    let precision = weighted_gram(dataset.x(), &omega) + prior.precision();
    let l_post = cholesky(&precision)?;
    let l_prior = cholesky(prior.precision())?;
    let rhs = dataset.x().tr_mul(&kappa(dataset)) + prior.precision_mean();
    let m = cholesky_solve(&l_post, &rhs);
    let v = spd_inverse(&precision)?;

    let log_det_post: f64 = 2.0 * l_post.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_prior: f64 = 2.0 * l_prior.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mu = prior.mu();
    let gaussian = 0.5 * (log_det_prior - log_det_post) + 0.5 * m.dot(&rhs) - 0.5 * mu.dot(&prior.precision_mean());
    let mut local = 0.0;
    for t in 0..dataset.n() {
        let phi = log_cosh(0.5 * xi[t]) + LN_2;
        local += 0.5 * omega[t] * xi[t] * xi[t] - dataset.m()[t] * phi;
    }
    Ok(Bound { m, v, elbo: gaussian + local })
}

/// Log of `integral p(beta) prod_t exp(f_t(beta, xi_t)) d beta`, the closed
/// form lower bound on the log marginal likelihood (up to the same dropped
/// binomial constants as the log posterior).
pub fn elbo(dataset: &Dataset, prior: &GaussianPrior, xi: &DVector<f64>) -> Result<f64> {
    bound_at(dataset, prior, xi).map(|b| b.elbo)
}

/// Lower bound `f_t(psi, xi)` on `l_t(psi) = y psi - m log(1 + e^psi)`.
pub fn local_bound(y: f64, m: f64, psi: f64, xi: f64) -> f64 {
    let kappa = y - 0.5 * m;
    let l_xi = y * xi - m * crate::model::softplus(xi);
    kappa * (psi - xi) - m * lambda_hat(xi) * (psi * psi - xi * xi) + l_xi
}

/// Run the variational iteration until the bound changes by at most `tol`.
pub fn fit_vb(dataset: &Dataset, prior: &GaussianPrior, tol: f64, max_iter: usize) -> Result<FitReport> {
    fit_vb_with_state(dataset, prior, tol, max_iter).map(|(r, _)| r)
}

pub fn fit_vb_with_state(
    dataset: &Dataset,
    prior: &GaussianPrior,
    tol: f64,
    max_iter: usize,
) -> Result<(FitReport, VbState)> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let mut xi = dataset.psi(prior.mu())?.map(|v| v.abs() + XI_INIT_FLOOR);
    let mut bound = bound_at(dataset, prior, &xi)?;
    let mut trace = vec![TraceEntry { iteration: 0, objective: bound.elbo, step_norm: 0.0 }];
    let mut converged = false;
    let mut iteration = 0;
    while iteration < max_iter {
        let next_xi = xi_update(dataset, &bound.m, &bound.v)?;
        let next = bound_at(dataset, prior, &next_xi)?;
        iteration += 1;
        let step = (&next.m - &bound.m).amax();
        let change = (next.elbo - bound.elbo).abs();
        trace.push(TraceEntry { iteration, objective: next.elbo, step_norm: step });
        xi = next_xi;
        bound = next;
        if change <= tol {
            converged = true;
            break;
        }
    }
    let state = VbState { m: bound.m.clone(), v: bound.v.clone(), xi, elbo: bound.elbo };
    let report = FitReport {
        beta_hat: bound.m,
        cov: Some(bound.v),
        trace,
        iterations: iteration,
        converged,
        diverged: false,
        algorithm: Algorithm::Vb,
        grad_norm: f64::NAN,
    };
    Ok((report, state))
}
