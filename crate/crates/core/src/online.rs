//! Online (stochastic-approximation) EM over mini-batches, Polyak-Ruppert
//! averaging, and a plain stochastic-gradient baseline.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::em::{e_step, Algorithm, FitReport, TraceEntry};
use crate::error::{Error, Result};
use crate::linsolve::{solve_direct, spd_inverse, SpdSystem};
use crate::model::{kappa, log_posterior_value, sigmoid, weighted_gram, Dataset, GaussianPrior};

/// Decay schedule `gamma_t = scale * (t + t0 + 1)^{-c}`, clamped to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LearnRate {
    c: f64,
    t0: f64,
    scale: f64,
}

impl LearnRate {
    pub fn new(c: f64, t0: f64) -> Result<Self> {
        Self::with_scale(c, t0, 1.0)
    }

    pub fn with_scale(c: f64, t0: f64, scale: f64) -> Result<Self> {
        if !(c > 0.5 && c < 1.0) {
            return Err(Error::Domain(format!("learning-rate exponent must lie in (0.5, 1), got {c}")));
        }
        if !(t0 >= 0.0) || !t0.is_finite() {
            return Err(Error::Domain(format!("learning-rate offset must be >= 0, got {t0}")));
        }
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::Domain(format!("learning-rate scale must be >= 0, got {scale}")));
        }
        Ok(Self { c, t0, scale })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    fn at(&self, step: usize) -> f64 {
        (self.scale * (step as f64 + self.t0 + 1.0).powf(-self.c)).min(1.0)
    }
}

impl Default for LearnRate {
    fn default() -> Self {
        Self { c: 0.52, t0: 0.0, scale: 1.0 }
    }
}

/// Step size for mini-batch number `step` (1-based).
pub fn gamma(rate: &LearnRate, step: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Domain("learning-rate step is 1-based".into()));
    }
    Ok(rate.at(step))
}

/// Running sufficient statistics of the online EM.
///
/// `s_bar` and `d_bar` are per-observation averages of `X^T Omega X` and
/// `X^T kappa`, so `n_processed * s_bar` is on the scale of a full batch.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub s_bar: DMatrix<f64>,
    pub d_bar: DVector<f64>,
    pub beta: DVector<f64>,
    pub step: usize,
    pub n_processed: usize,
    /// Iterates with `step > pr_burn` enter the average.
    pub pr_burn: usize,
    pub pr_sum: DVector<f64>,
    pub pr_count: usize,
    /// Solve `s_bar beta = d_bar` with no prior.
    pub prior_free: bool,
}

/// Default starting ridge on `s_bar`.
pub const DEFAULT_RIDGE: f64 = 1e-6;

impl OnlineState {
    pub fn new(d: usize, pr_burn: usize) -> Self {
        Self::with_start(DVector::zeros(d), DEFAULT_RIDGE, pr_burn)
    }

    pub fn with_start(beta0: DVector<f64>, ridge: f64, pr_burn: usize) -> Self {
        let d = beta0.len();
        Self {
            s_bar: DMatrix::from_diagonal_element(d, d, ridge),
            d_bar: DVector::zeros(d),
            beta: beta0,
            step: 0,
            n_processed: 0,
            pr_burn,
            pr_sum: DVector::zeros(d),
            pr_count: 0,
            prior_free: false,
        }
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    /// Posterior precision `n s_bar + Sigma^{-1}` implied by the statistics.
    pub fn posterior_precision(&self, prior: &GaussianPrior) -> DMatrix<f64> {
        &self.s_bar * self.n_processed as f64 + prior.precision()
    }
}

/// One mini-batch step with the scheduled `gamma`.
pub fn online_update(state: OnlineState, batch: &Dataset, rate: &LearnRate, prior: &GaussianPrior) -> Result<OnlineState> {
    let g = gamma(rate, state.step + 1)?;
    online_update_with_gamma(state, batch, g, prior)
}

/// One mini-batch step with an explicit `gamma` in (0, 1].
pub fn online_update_with_gamma(
    mut state: OnlineState,
    batch: &Dataset,
    gamma: f64,
    prior: &GaussianPrior,
) -> Result<OnlineState> {
    if batch.n() == 0 {
        return Err(Error::InvalidInput("online update needs a non-empty batch".into()));
    }
    if batch.d() != state.d() {
        return Err(Error::DimensionMismatch { what: "batch feature dimension", expected: state.d(), got: batch.d() });
    }
    if prior.d() != state.d() {
        return Err(Error::DimensionMismatch { what: "prior dimension", expected: state.d(), got: prior.d() });
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if batch.n() == 1 {
        log::warn!("online EM with single-observation batches is numerically unstable");
    }
    let b = batch.n() as f64;
    let omega = e_step(batch, &state.beta)?;
    let s_batch = weighted_gram(batch.x(), &omega) / b;
    let d_batch = batch.x().tr_mul(&kappa(batch)) / b;
    state.s_bar = &state.s_bar * (1.0 - gamma) + s_batch * gamma;
    state.d_bar = &state.d_bar * (1.0 - gamma) + d_batch * gamma;
    state.n_processed += batch.n();
    state.step += 1;

    let system = if state.prior_free {
        SpdSystem::new(symmetrize(&state.s_bar), state.d_bar.clone())?
    } else {
        let n = state.n_processed as f64;
        SpdSystem::new(
            symmetrize(&state.posterior_precision(prior)),
            &state.d_bar * n + prior.precision_mean(),
        )?
    };
    state.beta = solve_direct(&system)?;
    if state.step > state.pr_burn {
        state.pr_sum += &state.beta;
        state.pr_count += 1;
    }
    Ok(state)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Average of the iterates after the burn-in.
pub fn polyak_ruppert(state: &OnlineState) -> Result<DVector<f64>> {
    if state.pr_burn >= state.step || state.pr_count == 0 {
        return Err(Error::InvalidInput(format!(
            "Polyak-Ruppert burn-in {} not below step count {}",
            state.pr_burn, state.step
        )));
    }
    Ok(&state.pr_sum / state.pr_count as f64)
}

/// Consume a stream of mini-batches.
pub fn fit_online_stream<I>(batches: I, mut state: OnlineState, rate: &LearnRate, prior: &GaussianPrior) -> Result<OnlineState>
where
    I: IntoIterator<Item = Dataset>,
{
    for batch in batches {
        state = online_update(state, &batch, rate, prior)?;
    }
    Ok(state)
}

/// Settings for [`fit_online_em`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct OnlineConfig {
    pub batch_size: usize,
    pub passes: usize,
    pub rate: LearnRate,
    /// Burn-in in mini-batch steps; `None` averages over every pass but the first.
    pub pr_burn: Option<usize>,
    pub seed: u64,
    pub prior_free: bool,
}

impl OnlineConfig {
    /// Defaults: batch `max(d, 32)`, three passes, `c = 0.52`.
    pub fn for_dim(d: usize) -> Self {
        Self { batch_size: d.max(32), passes: 3, rate: LearnRate::default(), pr_burn: None, seed: 0, prior_free: false }
    }
}

/// Multi-pass online EM over an in-memory dataset, scanning rows in a fresh
/// random order each pass. `on_pass` sees the pass index (1-based) and the
/// state after it.
pub fn fit_online_em<F>(
    dataset: &Dataset,
    prior: &GaussianPrior,
    config: &OnlineConfig,
    mut on_pass: F,
) -> Result<(FitReport, OnlineState)>
where
    F: FnMut(usize, &OnlineState),
{
    if config.batch_size == 0 || config.passes == 0 {
        return Err(Error::InvalidInput("batch size and passes must be positive".into()));
    }
    if dataset.n() == 0 {
        return Err(Error::InvalidInput("online EM needs data".into()));
    }
    let steps_per_pass = dataset.n().div_ceil(config.batch_size);
    let burn = config.pr_burn.unwrap_or(if config.passes > 1 { steps_per_pass } else { steps_per_pass / 2 });
    let mut state = OnlineState::new(dataset.d(), burn);
    state.prior_free = config.prior_free;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.n()).collect();
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: log_posterior_value(dataset, prior, &state.beta)?,
        step_norm: 0.0,
    }];
    for pass in 1..=config.passes {
        order.shuffle(&mut rng);
        let before = state.beta.clone();
        for chunk in order.chunks(config.batch_size) {
            state = online_update(state, &dataset.subset(chunk), &config.rate, prior)?;
        }
        trace.push(TraceEntry {
            iteration: pass,
            objective: log_posterior_value(dataset, prior, &state.beta)?,
            step_norm: (&state.beta - before).amax(),
        });
        on_pass(pass, &state);
    }
    let beta_hat = polyak_ruppert(&state).unwrap_or_else(|_| state.beta.clone());
    let cov = spd_inverse(&symmetrize(&state.posterior_precision(prior))).ok();
    let report = FitReport {
        beta_hat,
        cov,
        trace,
        iterations: state.step,
        converged: true,
        diverged: false,
        algorithm: Algorithm::OnlineEm,
        grad_norm: f64::NAN,
    };
    Ok((report, state))
}

/// Per-example stochastic gradient ascent on the log posterior, with the
/// prior spread evenly over the `N` examples.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub beta: DVector<f64>,
    pub rate: LearnRate,
    /// Examples processed so far.
    pub t: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

/// Sup-norm beyond which SGD is declared divergent.
pub const SGD_DIVERGENCE: f64 = 1e10;

impl Sgd {
    pub fn new(d: usize, rate: LearnRate, seed: u64) -> Self {
        Self { beta: DVector::zeros(d), rate, t: 0, rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new() }
    }

    /// One pass over the data in a fresh random order.
    pub fn pass(&mut self, dataset: &Dataset, prior: &GaussianPrior) -> Result<()> {
        let n = dataset.n();
        if self.order.len() != n {
            self.order = (0..n).collect();
        }
        self.order.shuffle(&mut self.rng);
        let inv_n = 1.0 / n.max(1) as f64;
        let x = dataset.x();
        let prec = prior.precision();
        let mu = prior.mu();
        let d = dataset.d();
        let mut prior_grad = DVector::zeros(d);
        for &i in &self.order {
            self.t += 1;
            let g = self.rate.at(self.t);
            let row = x.row(i);
            let psi = row.dot(&self.beta.transpose());
            let resid = dataset.y()[i] - dataset.m()[i] * sigmoid(psi);
            prior_grad.gemv(inv_n, prec, &(&self.beta - mu), 0.0);
            for j in 0..d {
                self.beta[j] += g * (resid * row[j] - prior_grad[j]);
            }
            let norm = self.beta.amax();
            if !(norm <= SGD_DIVERGENCE) {
                return Err(Error::Divergence { step: self.t, norm });
            }
        }
        Ok(())
    }
}

/// Settings for [`fit_sgd`].
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub rate: LearnRate,
    pub passes: usize,
    pub seed: u64,
}

pub fn fit_sgd(dataset: &Dataset, prior: &GaussianPrior, rate: LearnRate, passes: usize, rng_seed: u64) -> Result<FitReport> {
    fit_sgd_observed(dataset, prior, &SgdConfig { rate, passes, seed: rng_seed }, |_, _| {})
}

pub fn fit_sgd_observed<F>(dataset: &Dataset, prior: &GaussianPrior, config: &SgdConfig, mut on_pass: F) -> Result<FitReport>
where
    F: FnMut(usize, &DVector<f64>),
{
    if config.passes == 0 {
        return Err(Error::InvalidInput("SGD needs at least one pass".into()));
    }
    if prior.d() != dataset.d() {
        return Err(Error::DimensionMismatch { what: "prior dimension", expected: dataset.d(), got: prior.d() });
    }
    let mut sgd = Sgd::new(dataset.d(), config.rate, config.seed);
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: log_posterior_value(dataset, prior, &sgd.beta)?,
        step_norm: 0.0,
    }];
    for pass in 1..=config.passes {
        let before = sgd.beta.clone();
        sgd.pass(dataset, prior)?;
        trace.push(TraceEntry {
            iteration: pass,
            objective: log_posterior_value(dataset, prior, &sgd.beta)?,
            step_norm: (&sgd.beta - before).amax(),
        });
        on_pass(pass, &sgd.beta);
    }
    Ok(FitReport {
        beta_hat: sgd.beta,
        cov: None,
        trace,
        iterations: config.passes,
        converged: true,
        diverged: false,
        algorithm: Algorithm::Sgd,
        grad_norm: f64::NAN,
    })
}
