//! Machine-readable fit reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{approx_stddev, Algorithm, FitReport, TraceEntry};
use crate::error::Result;

/// z-quantile for the symmetric 95% intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: Option<f64>,
    pub step_norm: Option<f64>,
}

/// JSON form of a [`FitReport`] plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub config: serde_json::Value,
    pub beta_hat: Vec<f64>,
    pub stddevs: Option<Vec<f64>>,
    pub intervals: Option<Vec<Interval>>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub grad_norm: Option<f64>,
    pub trace: Vec<TraceRecord>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ReportJson {
    pub fn new<C: Serialize>(report: &FitReport, config: &C, seed: u64) -> Result<Self> {
        let stddevs = report.cov.as_ref().map(|_| approx_stddev(report)).transpose()?;
        let intervals = stddevs.as_ref().map(|sd| {
            report
                .beta_hat
                .iter()
                .zip(sd.iter())
                .map(|(&b, &s)| Interval { lower: b - Z95 * s, upper: b + Z95 * s })
                .collect()
        });
        Ok(Self {
            algorithm: report.algorithm,
            seed,
            config: serde_json::to_value(config)?,
            beta_hat: report.beta_hat.iter().copied().collect(),
            stddevs: stddevs.map(|s| s.iter().copied().collect()),
            intervals,
            iterations: report.iterations,
            converged: report.converged,
            diverged: report.diverged,
            grad_norm: finite(report.grad_norm),
            trace: report.trace.iter().map(trace_record).collect(),
        })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

fn trace_record(e: &TraceEntry) -> TraceRecord {
    TraceRecord { iteration: e.iteration, objective: finite(e.objective), step_norm: finite(e.step_norm) }
}

/// Writes the JSON report for `report` to `path`.
pub fn emit_report<C: Serialize>(report: &FitReport, config: &C, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let json = ReportJson::new(report, config, seed)?;
    let mut w = crate::io::create(path)?;
    json.write(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportJson> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}
