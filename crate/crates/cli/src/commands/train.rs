use std::path::PathBuf;

use fbc_core::bvae::BvaeModel;
use fbc_core::checkpoint::save_checkpoint;
use fbc_core::datasets::{split, LabeledBatch};
use fbc_core::experiment::{Method, TrainedModel};
use fbc_core::fbc::{FbcConfig, FbcModel};
use log::{info, warn};

use super::{resolve, write_trace, CHECKPOINT_FILE, LAST_GOOD_FILE, TRACE_FILE};
use crate::config::{create_dir, write_json, RunConfig, SNAPSHOT_FILE};
use crate::error::Result;
use crate::RunArgs;

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
}

/// Fits a fresh model, handing back whatever it reached along with the
/// training result so a diverged run can still be saved.
fn fit(method: Method, config: FbcConfig, data: &LabeledBatch) -> Result<(TrainedModel, fbc_core::Result<()>)> {
    Ok(match method {
        Method::Fbc => {
            let mut m = FbcModel::new(config)?;
            let r = m.fit(data);
            (TrainedModel::Fbc(m), r)
        }
        Method::Bvae => {
            let mut m = BvaeModel::new(config)?;
            let r = m.fit(data);
            (TrainedModel::Bvae(m), r)
        }
    })
}

/// Trains on the first part of the protocol split and writes the
/// checkpoint, the trace and a resolved-config snapshot to `--out`.
pub fn cmd_train(args: &RunArgs) -> Result<TrainOutcome> {
    let cfg = resolve(
        args.config.as_deref(),
        args.method.as_deref(),
        args.beta,
        args.steps,
        args.seed,
        args.data.as_deref(),
    )?;
    let method = cfg.method.unwrap_or(Method::Fbc);
    let source = cfg.data_source();
    let data = source.load()?;
    let model_config = cfg.resolve_model(&data)?;
    let protocol = cfg.protocol();
    let [train_part, _, _] = split(&data, &protocol.split)?;

    create_dir(&args.out)?;
    let snapshot = RunConfig {
        command: Some("train".into()),
        method: Some(method),
        model: Some(model_config.clone()),
        data: Some(source),
        protocol: Some(protocol),
        ..RunConfig::default()
    };
    write_json(&args.out.join(SNAPSHOT_FILE), &snapshot)?;
    info!(
        "training {method} (beta {}, {} steps, seed {}) on {} samples",
        model_config.beta,
        model_config.steps,
        model_config.seed,
        train_part.len()
    );

    let (model, result) = fit(method, model_config, &train_part)?;
    let trace = args.out.join(TRACE_FILE);
    write_trace(&trace, &model)?;
    if let Err(e) = result {
        if matches!(e, fbc_core::Error::Diverged { .. }) {
            let path = args.out.join(LAST_GOOD_FILE);
            save_checkpoint(&path, &model)?;
            warn!("training diverged; last finite parameters saved to {}", path.display());
        }
        return Err(e.into());
    }
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &model)?;
    Ok(TrainOutcome { model, checkpoint, trace })
}
