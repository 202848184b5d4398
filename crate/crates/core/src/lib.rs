//! Polya-Gamma EM for binomial, negative-binomial and multinomial logistic
//! regression, with the Jaakkola-Jordan variational iteration, an online
//! stochastic-approximation EM, and sparse (lasso / bridge) variants.

pub mod benchmark;
pub mod em;
pub mod error;
pub mod io;
pub mod linsolve;
pub mod model;
pub mod multinomial;
pub mod online;
pub mod pg_math;
pub mod report;
pub mod simulate;
pub mod sparse;
pub mod vb;

pub use em::{approx_stddev, fit_em, fit_qnem, Algorithm, FitReport, TraceEntry};
pub use error::{Error, Result};
pub use model::{Dataset, GaussianPrior};
