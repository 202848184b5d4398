//! Symmetric positive-definite solvers for the M-step: a Cholesky direct
//! solve and the epsilon-tolerance linear conjugate-gradient method.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The normal equations `S beta = d` of one M-step.
#[derive(Debug, Clone)]
pub struct SpdSystem {
    s: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl SpdSystem {
    pub fn new(s: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        let d = rhs.len();
        if s.nrows() != d || s.ncols() != d {
            return Err(Error::DimensionMismatch { what: "system matrix", expected: d, got: s.nrows() });
        }
        let scale = s.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!("system matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { s, rhs })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }
}

/// Lower Cholesky factor `L` with `L L^T = a`.
///
/// Fails on the first non-positive pivot, reporting its index and value.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut z = b.clone();
    for i in 0..n {
        let mut v = z[i];
        for k in 0..i {
            v -= l[(i, k)] * z[k];
        }
        z[i] = v / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut v = z[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * z[k];
        }
        z[i] = v / l[(i, i)];
    }
    z
}

/// `log det a` for SPD `a`.
pub fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Inverse of an SPD matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        inv.set_column(j, &cholesky_solve(&l, &e));
    }
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Exact solve by Cholesky factorization.
pub fn solve_direct(system: &SpdSystem) -> Result<DVector<f64>> {
    let l = cholesky(&system.s)?;
    Ok(cholesky_solve(&l, &system.rhs))
}

/// Settings for [`solve_cg`].
#[derive(Debug, Clone)]
pub struct CgConfig {
    pub eps: f64,
    pub max_iter: usize,
    pub warm_start: Option<DVector<f64>>,
}

impl CgConfig {
    pub fn new(eps: f64, max_iter: usize) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Domain(format!("CG tolerance must lie in (0, 1), got {eps}")));
        }
        if max_iter == 0 {
            return Err(Error::Domain("CG needs max_iter >= 1".into()));
        }
        Ok(Self { eps, max_iter, warm_start: None })
    }

    /// Defaults for a `d`-dimensional system: `eps = 1e-8`, `10 d` iterations.
    pub fn for_dim(d: usize) -> Self {
        Self { eps: 1e-8, max_iter: (10 * d).max(1), warm_start: None }
    }

    pub fn with_warm_start(mut self, x0: DVector<f64>) -> Self {
        self.warm_start = Some(x0);
        self
    }
}

/// Result of a CG run.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// `max_iter` was hit before the residual tolerance.
    pub truncated: bool,
    /// Squared residual norms, starting with the initial residual.
    pub residual_sq: Vec<f64>,
}

/// Epsilon-tolerance conjugate gradients on `S x = d`.
///
/// Stops once `|d - S x|^2 <= eps^2 |d - S x0|^2` (or the residual reaches
/// rounding level relative to `d`) or after `max_iter` iterations, the
/// latter flagged as truncated.
pub fn solve_cg(system: &SpdSystem, config: &CgConfig) -> Result<CgOutcome> {
    let s = &system.s;
    cg_with_operator(|v| s * v, &system.rhs, config)
}

/// CG against a matrix-free operator `v -> S v`.
pub fn cg_with_operator<F>(apply: F, rhs: &DVector<f64>, config: &CgConfig) -> Result<CgOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = rhs.len();
    let mut x = match &config.warm_start {
        Some(x0) if x0.len() == n => x0.clone(),
        Some(x0) => return Err(Error::DimensionMismatch { what: "CG warm start", expected: n, got: x0.len() }),
        None => DVector::zeros(n),
    };
    let mut r = rhs - apply(&x);
    let mut b = r.clone();
    let mut delta_new = r.dot(&r);
    let delta0 = delta_new;
    // residuals below the rounding floor of the right-hand side cannot shrink further
    let floor = (100.0 * f64::EPSILON) * (100.0 * f64::EPSILON) * rhs.dot(rhs);
    let threshold = (config.eps * config.eps * delta0).max(floor);
    let mut residual_sq = vec![delta_new];
    let mut i = 0;
    while i < config.max_iter && delta_new > threshold {
        let q = apply(&b);
        let curv = b.dot(&q);
        if !(curv > 0.0) {
            return Err(Error::NotPositiveDefinite { index: i, pivot: curv });
        }
        let alpha = delta_new / curv;
        x.axpy(alpha, &b, 1.0);
        r.axpy(-alpha, &q, 1.0);
        let delta_old = delta_new;
        delta_new = r.dot(&r);
        b = &r + &b * (delta_new / delta_old);
        residual_sq.push(delta_new);
        i += 1;
    }
    Ok(CgOutcome { x, iterations: i, truncated: delta_new > threshold, residual_sq })
}
