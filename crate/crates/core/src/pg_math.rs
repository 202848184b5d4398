//! Scalar functions of the Polya-Gamma family PG(b, c).
//!
//! Only the pieces the EM machinery needs are provided: the conditional mean,
//! the Laplace transform, and a truncated sum-of-gammas sampler that serves as
//! a Monte-Carlo check on the closed forms.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Default number of gamma terms kept by [`pg_sample_truncated`].
pub const DEFAULT_SERIES_TERMS: usize = 200;

const TAYLOR_CUTOFF: f64 = 1e-4;

/// Validated PG(b, c) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgParams {
    b: f64,
    c: f64,
}

impl PgParams {
    pub fn new(b: f64, c: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::Domain(format!("PG shape must be positive, got {b}")));
        }
        if !c.is_finite() {
            return Err(Error::Domain(format!("PG tilt must be finite, got {c}")));
        }
        Ok(Self { b, c })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn mean(&self) -> f64 {
        self.b * tanh_ratio(self.c)
    }

    pub fn laplace(&self, t: f64) -> Result<f64> {
        pg_laplace(self.b, self.c, t)
    }
}

/// `tanh(c/2) / (2c)`, i.e. the PG(1, c) mean, with the removable singularity
/// at zero filled in by its Taylor series.
#[inline]
pub(crate) fn tanh_ratio(c: f64) -> f64 {
    let c = c.abs();
    if c < TAYLOR_CUTOFF {
        let h2 = 0.25 * c * c;
        0.25 * (1.0 - h2 / 3.0 + 2.0 * h2 * h2 / 15.0)
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

/// Mean of PG(b, c): `(b / 2c) tanh(c / 2)`, equal to `b / 4` at `c = 0`.
pub fn pg_mean(b: f64, c: f64) -> Result<f64> {
    PgParams::new(b, c).map(|p| p.mean())
}

/// `log cosh(x)` without overflow.
#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// Laplace transform `E[exp(-t w)]` of `w ~ PG(b, c)`:
/// `cosh^b(c/2) / cosh^b(sqrt((c^2/2 + t) / 2))`, evaluated in log space.
pub fn pg_laplace(b: f64, c: f64, t: f64) -> Result<f64> {
    let p = PgParams::new(b, c)?;
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("Laplace argument must be >= 0, got {t}")));
    }
    let inner = 0.5 * p.c * p.c + t;
    if inner < 0.0 {
        return Err(Error::Domain("c^2/2 + t must be non-negative".into()));
    }
    let log_ratio = log_cosh(0.5 * p.c) - log_cosh((0.5 * inner).sqrt());
    Ok((p.b * log_ratio).exp())
}

/// One draw of the PG(b, c) series truncated after `terms` gamma variates.
///
/// This is a test oracle, not an exact sampler: the omitted tail biases the
/// draw slightly downward.
pub fn pg_sample_truncated<R: Rng + ?Sized>(b: f64, c: f64, terms: usize, rng: &mut R) -> Result<f64> {
    let p = PgParams::new(b, c)?;
    if terms == 0 {
        return Err(Error::Domain("truncated PG series needs at least one term".into()));
    }
    let gamma = Gamma::new(p.b, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let shift = p.c * p.c / (4.0 * PI * PI);
    let mut sum = 0.0;
    for k in 1..=terms {
        let h = k as f64 - 0.5;
        sum += gamma.sample(rng) / (h * h + shift);
    }
    Ok(sum / (2.0 * PI * PI))
}
