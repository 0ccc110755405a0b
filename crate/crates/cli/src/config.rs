//! Run configuration files and their resolution against flags and data.

use std::fs;
use std::path::{Path, PathBuf};

use fbc_core::datasets::{
    load_tabular_csv, read_bundle, sample_dsprites_unfair, DataKind, LabeledBatch, SyntheticParams, TabularSchema,
};
use fbc_core::experiment::{Method, ProtocolConfig};
use fbc_core::fbc::{DatasetKind, FbcConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SNAPSHOT_FILE: &str = "config.json";

/// Where a run's samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticTabular {
        n: usize,
        feature_dim: usize,
        num_sensitive: usize,
        correlation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        seed: u64,
    },
    DspritesUnfair {
        n: usize,
        resolution: usize,
        seed: u64,
    },
    /// A directory written by `gen-data`.
    Bundle {
        path: PathBuf,
    },
    /// A CSV file described by a JSON schema.
    Csv {
        path: PathBuf,
        schema: PathBuf,
    },
}

fn default_noise() -> f64 {
    fbc_core::datasets::DEFAULT_NOISE
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::SyntheticTabular {
            n: 8000,
            feature_dim: 9,
            num_sensitive: 4,
            correlation: 0.8,
            noise: default_noise(),
            seed: 1000,
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<LabeledBatch> {
        Ok(match self {
            DataSource::SyntheticTabular { n, feature_dim, num_sensitive, correlation, noise, seed } => {
                SyntheticParams::new(*n, *feature_dim, *num_sensitive, *correlation, *noise, *seed)?.generate()?.batch
            }
            DataSource::DspritesUnfair { n, resolution, seed } => sample_dsprites_unfair(*n, *resolution, *seed)?,
            DataSource::Bundle { path } => read_bundle(path)?.0,
            DataSource::Csv { path, schema } => {
                load_tabular_csv(path, &TabularSchema::from_json_file(schema)?, None)?.0
            }
        })
    }

    /// Generated sources reseeded to `seed`; files are left alone.
    pub fn reseeded(&self, seed: u64) -> DataSource {
        let mut out = self.clone();
        match &mut out {
            DataSource::SyntheticTabular { seed: s, .. } | DataSource::DspritesUnfair { seed: s, .. } => *s = seed,
            DataSource::Bundle { .. } | DataSource::Csv { .. } => {}
        }
        out
    }
}

/// One method and the β values to sweep it over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodGrid {
    pub method: Method,
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub grids: Vec<MethodGrid>,
    pub seeds: Vec<u64>,
    /// Generated data for seed `k` uses seed `data_seed_offset + k`.
    #[serde(default)]
    pub data_seed_offset: Option<u64>,
    /// Width of the `A_s` bins of the Pareto front.
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
}

fn default_bin_width() -> f64 {
    0.05
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            grids: vec![
                MethodGrid { method: Method::Fbc, betas: vec![0.0, 0.25, 0.5, 1.0] },
                MethodGrid { method: Method::Bvae, betas: vec![0.0, 0.5, 2.0, 4.0] },
            ],
            seeds: (0..5).collect(),
            data_seed_offset: Some(1000),
            bin_width: default_bin_width(),
        }
    }
}

/// Contents of a `--config` file. Every field is optional; a resolved
/// snapshot written next to a run's outputs is itself a valid config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The command that wrote this snapshot, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Checkpoint a probe or export read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// `adults`, `compas`, `heritage`, `synthetic` or `dsprites`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// A complete model configuration; wins over `preset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<FbcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

impl RunConfig {
    /// A config that does not parse is a usage error.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => read_json(p).map_err(|e| match e {
                CliError::Json { path, source } => CliError::Usage(format!("{}: {source}", path.display())),
                other => other,
            }),
        }
    }

    pub fn data_source(&self) -> DataSource {
        self.data.clone().unwrap_or_default()
    }

    /// Model settings for `data`: an explicit model, else the named preset,
    /// else one derived from the data's shape. Overrides apply last.
    pub fn resolve_model(&self, data: &LabeledBatch) -> Result<FbcConfig> {
        let mut config = match (&self.model, self.preset.as_deref()) {
            (Some(model), _) => model.clone(),
            (None, Some(name)) => preset(name, data)?,
            (None, None) => derived(data)?,
        };
        if let Some(beta) = self.beta {
            config.beta = beta;
        }
        if let Some(steps) = self.steps {
            config.steps = steps;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate().map_err(|e| CliError::Usage(format!("model configuration: {e}")))?;
        Ok(config)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let base = self.protocol.clone().unwrap_or_default();
        match self.seed {
            Some(seed) => base.seeded(seed),
            None => base,
        }
    }
}

fn preset(name: &str, data: &LabeledBatch) -> Result<FbcConfig> {
    Ok(match name {
        "adults" => FbcConfig::adults(),
        "compas" => FbcConfig::compas(),
        "heritage" => FbcConfig::heritage(),
        "synthetic" => FbcConfig::synthetic(),
        "dsprites" => {
            let resolution = data.sample_shape().last().copied().unwrap_or(0);
            FbcConfig::dsprites(resolution).map_err(|e| CliError::Usage(e.to_string()))?
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?} (expected adults, compas, heritage, synthetic or dsprites)"
            )))
        }
    })
}

fn derived(data: &LabeledBatch) -> Result<FbcConfig> {
    match data.kind() {
        DataKind::Image => preset("dsprites", data),
        DataKind::Tabular if data.feature_dim() == 9 && data.num_sensitive == 4 => Ok(FbcConfig::synthetic()),
        DataKind::Tabular => {
            Ok(FbcConfig::tabular(DatasetKind::Custom, data.feature_dim(), data.num_sensitive, 10, 64))
        }
    }
}
