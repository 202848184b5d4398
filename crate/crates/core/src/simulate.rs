//! Synthetic data generators. Every generator is a pure function of its
//! configuration and seed.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// d = 10, n = 250, standard normal predictors, beta evenly spaced on [-3, 3].
    SmallDense,
    /// Factor-correlated Gaussian predictors with columns scaled to variance 1/d.
    Collinear,
    /// 0/1 predictors, first ten coefficients ±√5 alternating, rest zero.
    SparseBinary,
    /// Standard normal predictors and coefficients.
    Custom,
}

impl Design {
    pub fn as_str(&self) -> &'static str {
        match self {
            Design::SmallDense => "small-dense",
            Design::Collinear => "collinear",
            Design::SparseBinary => "sparse-binary",
            Design::Custom => "custom",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-dense" => Ok(Design::SmallDense),
            "collinear" => Ok(Design::Collinear),
            "sparse-binary" => Ok(Design::SparseBinary),
            "custom" => Ok(Design::Custom),
            _ => Err(Error::InvalidInput(format!("unknown design '{s}'"))),
        }
    }
}

/// Response family for generated counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Family {
    Binomial { trials: u32 },
    NegativeBinomial { r: f64 },
}

/// Overrides for a design's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOverrides {
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub factors: Option<usize>,
    pub family: Option<Family>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub design: Design,
    pub n: usize,
    pub d: usize,
    /// Number of latent factors (collinear design only).
    pub factors: usize,
    pub family: Family,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(design: Design, seed: u64, overrides: &SimOverrides) -> Result<Self> {
        let (n, d, factors) = match design {
            Design::SmallDense => (250, 10, 0),
            Design::Collinear => (10_000, 50, 10),
            Design::SparseBinary => (500, 50, 0),
            Design::Custom => (200, 5, 0),
        };
        let cfg = Self {
            design,
            n: overrides.n.unwrap_or(n),
            d: overrides.d.unwrap_or(d),
            factors: overrides.factors.unwrap_or(factors),
            family: overrides.family.unwrap_or(Family::Binomial { trials: 1 }),
            seed,
        };
        if cfg.n == 0 || cfg.d == 0 {
            return Err(Error::InvalidInput("simulation needs n >= 1 and d >= 1".into()));
        }
        if design == Design::Collinear && cfg.factors == 0 {
            return Err(Error::InvalidInput("collinear design needs at least one factor".into()));
        }
        if design == Design::SparseBinary && cfg.d < 10 {
            return Err(Error::InvalidInput("sparse-binary design needs d >= 10".into()));
        }
        match cfg.family {
            Family::Binomial { trials } if trials == 0 => {
                return Err(Error::InvalidInput("binomial trials must be >= 1".into()));
            }
            Family::NegativeBinomial { r } if !(r > 0.0) || !r.is_finite() => {
                return Err(Error::InvalidInput("negative-binomial r must be positive".into()));
            }
            _ => {}
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub beta_true: DVector<f64>,
    pub config: SimConfig,
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    // fill row by row so the draw order does not depend on storage layout
    let mut x = DMatrix::zeros(n, d);
    for t in 0..n {
        for j in 0..d {
            x[(t, j)] = StandardNormal.sample(rng);
        }
    }
    x
}

/// Coefficients `linspace(-3, 3, d)`.
pub fn evenly_spaced_beta(d: usize) -> DVector<f64> {
    if d == 1 {
        return DVector::zeros(1);
    }
    DVector::from_fn(d, |j, _| -3.0 + 6.0 * j as f64 / (d - 1) as f64)
}

pub fn simulate(design: Design, seed: u64, overrides: &SimOverrides) -> Result<Simulated> {
    simulate_config(&SimConfig::new(design, seed, overrides)?)
}

pub fn simulate_config(cfg: &SimConfig) -> Result<Simulated> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d) = (cfg.n, cfg.d);
    let (x, beta) = match cfg.design {
        Design::SmallDense => (normal_matrix(&mut rng, n, d), evenly_spaced_beta(d)),
        Design::Collinear => {
            let b = normal_matrix(&mut rng, d, cfg.factors);
            let f = normal_matrix(&mut rng, n, cfg.factors);
            let e = normal_matrix(&mut rng, n, d);
            // rows of f B^T + sqrt(0.1) e have covariance B B^T + 0.1 I
            let mut x = &f * b.transpose() + e * 0.1f64.sqrt();
            for j in 0..d {
                let var = b.row(j).norm_squared() + 0.1;
                let s = 1.0 / (var * d as f64).sqrt();
                x.column_mut(j).scale_mut(s);
            }
            let beta = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            (x, beta)
        }
        Design::SparseBinary => {
            let mut x = DMatrix::zeros(n, d);
            for t in 0..n {
                for j in 0..d {
                    x[(t, j)] = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
            let s5 = 5f64.sqrt();
            let beta = DVector::from_fn(d, |j, _| if j < 10 { if j % 2 == 0 { s5 } else { -s5 } } else { 0.0 });
            (x, beta)
        }
        Design::Custom => {
            let x = normal_matrix(&mut rng, n, d);
            let beta = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            (x, beta)
        }
    };
    let psi = &x * &beta;
    let dataset = match cfg.family {
        Family::Binomial { trials } => {
            let y = DVector::from_fn(n, |t, _| {
                let p = sigmoid(psi[t]);
                (0..trials).filter(|_| rng.random::<f64>() < p).count() as f64
            });
            Dataset::new(y, DVector::from_element(n, trials as f64), x)?
        }
        Family::NegativeBinomial { r } => {
            // gamma-Poisson mixture with mean r e^psi
            let mut y = DVector::zeros(n);
            for t in 0..n {
                let scale = psi[t].exp();
                let g = Gamma::new(r, scale).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut rng);
                y[t] = if g > 0.0 {
                    Poisson::new(g).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut rng)
                } else {
                    0.0
                };
            }
            Dataset::negative_binomial(y, r, x)?
        }
    };
    Ok(Simulated { dataset, beta_true: beta, config: cfg.clone() })
}

/// Random train/test split with `holdout_frac` of the rows held out.
pub fn holdout_split(dataset: &Dataset, holdout_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::InvalidInput(format!("holdout fraction must lie in (0, 1), got {holdout_frac}")));
    }
    let n = dataset.n();
    let n_test = ((n as f64) * holdout_frac).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidInput(format!("holdout fraction {holdout_frac} leaves an empty side with n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let (test, train) = idx.split_at(n_test);
    Ok((dataset.subset(train), dataset.subset(test)))
}
