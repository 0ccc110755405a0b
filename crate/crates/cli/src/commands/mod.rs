//! Command implementations and the helpers they share.

mod export;
mod gen_data;
mod probe;
mod sweep;
mod train;

use std::path::Path;

use fbc_core::experiment::{Method, TrainedModel};

pub use export::cmd_export_embeddings;
pub use gen_data::cmd_gen_data;
pub use probe::{cmd_probe, ProbeOutcome, ProbeReport};
pub use sweep::{
    cmd_sweep, run_dir, summarize, RunFailure, RunReport, SummaryRow, SweepOutcome, FAILURES_FILE, RECORD_FILE,
    SUMMARY_FILE,
};
pub use train::{cmd_train, TrainOutcome};

use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.fbck";
pub const LAST_GOOD_FILE: &str = "checkpoint.last-good.fbck";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

fn parse_method(name: &str) -> Result<Method> {
    Ok(name.parse()?)
}

/// Config file plus flag overrides; flags win.
fn resolve(
    config: Option<&Path>,
    method: Option<&str>,
    beta: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
    data: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = method {
        cfg.method = Some(parse_method(m)?);
    }
    cfg.beta = beta.or(cfg.beta);
    cfg.steps = steps.or(cfg.steps);
    cfg.seed = seed.or(cfg.seed);
    if let Some(path) = data {
        cfg.data = Some(DataSource::Bundle { path: path.to_path_buf() });
    }
    Ok(cfg)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|source| CliError::Csv { path: path.to_path_buf(), source })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv { path: path.to_path_buf(), source }
}

fn finish_csv(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `step, loss, distortion` and the rate under the method's own name.
pub fn write_trace(path: &Path, model: &TrainedModel) -> Result<()> {
    let rate = match model.method() {
        Method::Fbc => "ce_rate",
        Method::Bvae => "kl_rate",
    };
    let mut w = csv_writer(path)?;
    w.write_record(["step", "loss", "distortion", rate]).map_err(csv_err(path))?;
    for row in model.trace() {
        w.write_record([row.step.to_string(), row.loss.to_string(), row.distortion.to_string(), row.rate.to_string()])
            .map_err(csv_err(path))?;
    }
    finish_csv(path, w)
}
