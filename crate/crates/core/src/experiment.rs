//! The evaluation protocol: train an encoder-decoder on one split, freeze
//! it, then fit auditors and a task probe on a second split and score them
//! on a third.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bvae::{train_bvae, BvaeModel};
use crate::datasets::{split, LabeledBatch, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    auditor_accuracy, chance_level, default_auditors, default_task_probe, delta_fpr, demographic_disparity,
    homogeneity, train_probe, ProbeSpec, SweepRecord,
};
use crate::fbc::{train, FbcConfig, FbcModel, LossTerms, TraceRow};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fbc,
    Bvae,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fbc => "fbc",
            Method::Bvae => "bvae",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbc" => Ok(Method::Fbc),
            "bvae" => Ok(Method::Bvae),
            other => Err(Error::Usage(format!("unknown method {other:?} (expected fbc or bvae)"))),
        }
    }
}

/// Probe settings for one protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub split: SplitSpec,
    pub auditors: Vec<ProbeSpec>,
    pub task_probe: ProbeSpec,
    /// Neighbors per point in the homogeneity score.
    pub neighbors: usize,
    /// Largest number of probe_eval points used for homogeneity.
    pub homogeneity_points: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            auditors: default_auditors(),
            task_probe: default_task_probe(),
            neighbors: 10,
            homogeneity_points: 1000,
        }
    }
}

impl ProtocolConfig {
    /// Reseeds every probe (and the split) from one seed.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.split.seed = seed;
        for (i, a) in self.auditors.iter_mut().enumerate() {
            a.seed = seed.wrapping_mul(31).wrapping_add(i as u64);
        }
        self.task_probe.seed = seed.wrapping_mul(31).wrapping_add(101);
        self
    }
}

/// A trained model of either family.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Fbc(FbcModel),
    Bvae(BvaeModel),
}

impl TrainedModel {
    pub fn method(&self) -> Method {
        match self {
            TrainedModel::Fbc(_) => Method::Fbc,
            TrainedModel::Bvae(_) => Method::Bvae,
        }
    }

    pub fn config(&self) -> &FbcConfig {
        match self {
            TrainedModel::Fbc(m) => m.config(),
            TrainedModel::Bvae(m) => m.config(),
        }
    }

    pub fn trace(&self) -> &[TraceRow] {
        match self {
            TrainedModel::Fbc(m) => m.trace(),
            TrainedModel::Bvae(m) => m.trace(),
        }
    }

    /// Code bits for FBC, posterior means for the Gaussian model.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            TrainedModel::Fbc(m) => Ok(m.encode(x)?.1.bits().clone()),
            TrainedModel::Bvae(m) => Ok(m.posterior(x)?.mu),
        }
    }

    /// Unweighted distortion and rate (cross-entropy or KL, nats).
    pub fn evaluate(&self, data: &LabeledBatch) -> Result<LossTerms> {
        match self {
            TrainedModel::Fbc(m) => m.evaluate(data),
            TrainedModel::Bvae(m) => m.evaluate(data),
        }
    }
}

pub fn train_model(method: Method, config: FbcConfig, data: &LabeledBatch) -> Result<TrainedModel> {
    Ok(match method {
        Method::Fbc => TrainedModel::Fbc(train(config, data)?),
        Method::Bvae => TrainedModel::Bvae(train_bvae(config, data)?),
    })
}

/// Everything measured on a frozen model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub a_s: f64,
    pub a_y: Option<f64>,
    pub chance_s: f64,
    pub chance_y: Option<f64>,
    /// Demographic disparity of the task probe (binary labels only).
    pub delta: Option<f64>,
    pub delta_fpr: Option<f64>,
    /// Sensitive group 0 against the rest.
    pub homogeneity: Option<f64>,
    pub rate: f64,
    pub distortion: f64,
}

/// Probes a frozen model: auditors on `S`, the task probe on `Y`, group
/// metrics from the task probe's held-out predictions.
pub fn probe_model(
    model: &TrainedModel,
    probe_train: &LabeledBatch,
    probe_eval: &LabeledBatch,
    protocol: &ProtocolConfig,
) -> Result<RunMetrics> {
    let rt = model.represent(&probe_train.features)?;
    let re = model.represent(&probe_eval.features)?;
    let a_s = auditor_accuracy(&rt, &probe_train.sensitive, &re, &probe_eval.sensitive, &protocol.auditors)?;
    let chance_s = chance_level(&probe_eval.sensitive)?;
    let terms = model.evaluate(probe_eval)?;

    let (mut a_y, mut chance_y, mut delta, mut fpr) = (None, None, None, None);
    if let (Some(yt), Some(ye)) = (&probe_train.labels, &probe_eval.labels) {
        let task = train_probe(&rt, yt, &re, ye, &protocol.task_probe)?;
        a_y = Some(task.accuracy);
        chance_y = Some(chance_level(ye)?);
        if probe_eval.num_labels == 2 {
            let pred = task.probe.predict(&re)?;
            let pred: Vec<usize> = pred.into_iter().map(|p| p.min(1)).collect();
            delta = demographic_disparity(&pred, &probe_eval.sensitive, probe_eval.num_sensitive).ok();
            fpr = delta_fpr(&pred, ye, &probe_eval.sensitive, probe_eval.num_sensitive).ok();
        }
    }

    let cap = probe_eval.len().min(protocol.homogeneity_points);
    let sub = re.select_rows(&(0..cap).collect::<Vec<_>>());
    let group_a: Vec<usize> = (0..cap).filter(|&i| probe_eval.sensitive[i] == 0).collect();
    let group_b: Vec<usize> = (0..cap).filter(|&i| probe_eval.sensitive[i] != 0).collect();
    let homogeneity = homogeneity(&sub, &group_a, &group_b, protocol.neighbors).ok();

    Ok(RunMetrics {
        a_s,
        a_y,
        chance_s,
        chance_y,
        delta,
        delta_fpr: fpr,
        homogeneity,
        rate: terms.rate,
        distortion: terms.distortion,
    })
}

/// Full protocol on `data`: split, train on the first part, probe on the rest.
pub fn run_protocol(
    method: Method,
    config: FbcConfig,
    data: &LabeledBatch,
    protocol: &ProtocolConfig,
) -> Result<(TrainedModel, SweepRecord, RunMetrics)> {
    let [train_part, probe_train, probe_eval] = split(data, &protocol.split)?;
    let (beta, seed) = (config.beta, config.seed);
    let model = train_model(method, config, &train_part)?;
    let metrics = probe_model(&model, &probe_train, &probe_eval, protocol)?;
    let record = SweepRecord {
        method: method.to_string(),
        beta,
        seed,
        rate: metrics.rate.max(0.0),
        distortion: metrics.distortion,
        a_s: metrics.a_s,
        a_y: metrics.a_y.unwrap_or(0.0),
    };
    Ok((model, record, metrics))
}
