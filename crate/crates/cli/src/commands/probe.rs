use std::path::{Path, PathBuf};

use fbc_core::checkpoint::load_checkpoint;
use fbc_core::datasets::{split, LabeledBatch};
use fbc_core::experiment::{probe_model, Method, ProtocolConfig, RunMetrics, TrainedModel};
use log::info;
use serde::{Deserialize, Serialize};

use super::{resolve, METRICS_FILE};
use crate::config::{create_dir, write_json, RunConfig, SNAPSHOT_FILE};
use crate::error::{CliError, Result};
use crate::ProbeArgs;

/// What `probe` writes to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub method: Method,
    pub beta: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RunMetrics,
}

#[derive(Debug)]
pub struct ProbeOutcome {
    pub report: ProbeReport,
    pub path: PathBuf,
}

/// A checkpoint with the data and protocol it should be read against.
pub(super) struct Frozen {
    pub model: TrainedModel,
    pub data: LabeledBatch,
    pub protocol: ProtocolConfig,
    pub snapshot: RunConfig,
}

pub(super) fn load_frozen(args: &ProbeArgs, command: &str) -> Result<Frozen> {
    let model = load_checkpoint(&args.checkpoint)?;
    let sibling = args.checkpoint.parent().map(|d| d.join(SNAPSHOT_FILE)).filter(|p| p.is_file());
    let config = args.config.clone().or(sibling);
    let cfg = resolve(config.as_deref(), None, None, None, args.seed, args.data.as_deref())?;
    let source = cfg.data_source();
    let data = source.load()?;
    check_fit(model.config(), &data, &args.checkpoint)?;
    let protocol = cfg.protocol();
    let snapshot = RunConfig {
        command: Some(command.into()),
        checkpoint: Some(args.checkpoint.clone()),
        method: Some(model.method()),
        model: Some(model.config().clone()),
        data: Some(source),
        protocol: Some(protocol.clone()),
        ..RunConfig::default()
    };
    Ok(Frozen { model, data, protocol, snapshot })
}

fn check_fit(config: &fbc_core::fbc::FbcConfig, data: &LabeledBatch, checkpoint: &Path) -> Result<()> {
    if data.sample_shape() != config.input_shape.as_slice() || data.num_sensitive != config.num_sensitive {
        return Err(CliError::Mismatch(format!(
            "{} expects samples {:?} with {} sensitive categories; data has {:?} with {}",
            checkpoint.display(),
            config.input_shape,
            config.num_sensitive,
            data.sample_shape(),
            data.num_sensitive
        )));
    }
    Ok(())
}

/// Probes a frozen checkpoint on the second and third parts of the split.
pub fn cmd_probe(args: &ProbeArgs) -> Result<ProbeOutcome> {
    let frozen = load_frozen(args, "probe")?;
    let [_, probe_train, probe_eval] = split(&frozen.data, &frozen.protocol.split)?;
    let metrics = probe_model(&frozen.model, &probe_train, &probe_eval, &frozen.protocol)?;
    let config = frozen.model.config();
    let report = ProbeReport { method: frozen.model.method(), beta: config.beta, seed: config.seed, metrics };

    create_dir(&args.out)?;
    write_json(&args.out.join(SNAPSHOT_FILE), &frozen.snapshot)?;
    let path = args.out.join(METRICS_FILE);
    write_json(&path, &report)?;
    info!("A_s {:.4} (chance {:.4}), rate {:.4}", report.metrics.a_s, report.metrics.chance_s, report.metrics.rate);
    Ok(ProbeOutcome { report, path })
}
