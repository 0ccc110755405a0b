//! Sweep records and their CSV/JSON serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one train/probe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    pub beta: f64,
    pub seed: u64,
    /// Nats per code.
    pub rate: f64,
    pub distortion: f64,
    pub a_s: f64,
    pub a_y: f64,
}

impl SweepRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a_s) || !(0.0..=1.0).contains(&self.a_y) {
            return Err(Error::Parameter(format!("accuracies must lie in [0, 1]: {self:?}")));
        }
        if !(self.rate >= 0.0) || !self.distortion.is_finite() {
            return Err(Error::Parameter(format!("rate must be non-negative and distortion finite: {self:?}")));
        }
        Ok(())
    }
}

pub fn write_records_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(["method", "beta", "seed", "rate", "distortion", "a_s", "a_y"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_records_json(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
