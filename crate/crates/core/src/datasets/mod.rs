//! Data sources: DSprites-Unfair, tabular CSV, the synthetic unfair
//! generator, the three-way split and on-disk dataset bundles.

mod bundle;
mod dsprites;
mod split;
mod synthetic;
mod tabular;

pub use bundle::{read_bundle, write_bundle, DatasetManifest, IMAGE_PACK_MAGIC};
pub use dsprites::{
    dsprites_sensitive, dsprites_weight, render_dsprite, sample_dsprites_factors, sample_dsprites_unfair,
    shape_conditional, FactorTuple, ORIENTATIONS, POSITIONS, QUADRANTS, SCALES, SHAPES,
};
pub use split::{split, SplitSpec};
pub use synthetic::{make_synthetic_unfair_tabular, SyntheticParams, SyntheticTabular, DEFAULT_NOISE};
pub use tabular::{load_tabular_csv, ColumnEncoding, TabularEncoding, TabularSchema};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether samples are flat vectors or single-channel square images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Tabular,
    Image,
}

/// Features, sensitive categories and optional task labels for `n` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `[n, d]` for tabular data or `[n, 1, R, R]` for images, values in [0, 1].
    pub features: Tensor,
    pub sensitive: Vec<usize>,
    pub num_sensitive: usize,
    pub labels: Option<Vec<usize>>,
    pub num_labels: usize,
}

impl LabeledBatch {
    pub fn new(
        features: Tensor,
        sensitive: Vec<usize>,
        num_sensitive: usize,
        labels: Option<Vec<usize>>,
        num_labels: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if sensitive.len() != n {
            return Err(Error::dim(
                "labeled batch",
                format!("{n} feature rows but {} sensitive values", sensitive.len()),
            ));
        }
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::dim("labeled batch", format!("{n} feature rows but {} labels", y.len())));
            }
            if let Some(&bad) = y.iter().find(|&&v| v >= num_labels) {
                return Err(Error::Data(format!("label {bad} outside {num_labels} classes")));
            }
        }
        if num_sensitive == 0 {
            return Err(Error::Data("no sensitive categories".into()));
        }
        if let Some(&bad) = sensitive.iter().find(|&&s| s >= num_sensitive) {
            return Err(Error::Data(format!("sensitive index {bad} outside {num_sensitive} categories")));
        }
        if !matches!(features.shape().len(), 2 | 4) {
            return Err(Error::dim("labeled batch", format!("unsupported feature shape {:?}", features.shape())));
        }
        Ok(Self { features, sensitive, num_sensitive, labels, num_labels })
    }

    pub fn len(&self) -> usize {
        self.sensitive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensitive.is_empty()
    }

    pub fn kind(&self) -> DataKind {
        if self.features.shape().len() == 4 {
            DataKind::Image
        } else {
            DataKind::Tabular
        }
    }

    /// Shape of one sample, without the batch dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_len()
    }

    /// `[n, num_sensitive]` indicator matrix.
    pub fn sensitive_one_hot(&self) -> Tensor {
        one_hot(&self.sensitive, self.num_sensitive)
    }

    /// Sub-batch in the given row order.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            features: self.features.select_rows(indices),
            sensitive: indices.iter().map(|&i| self.sensitive[i]).collect(),
            num_sensitive: self.num_sensitive,
            labels: self.labels.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect()),
            num_labels: self.num_labels,
        }
    }
}

pub fn one_hot(indices: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * classes];
    for (row, &c) in indices.iter().enumerate() {
        data[row * classes + c] = 1.0;
    }
    Tensor::from_parts(vec![indices.len(), classes], data)
}
