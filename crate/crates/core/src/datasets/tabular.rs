//! CSV ingestion driven by a small JSON schema.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which CSV columns play which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub features: Vec<String>,
    pub sensitive: Vec<String>,
    #[serde(default)]
    pub label: Option<String>,
    /// Feature columns to one-hot encode instead of scaling.
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl TabularSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnEncoding {
    /// Min-max scaling; a constant column maps to 0.
    Numeric { min: f64, max: f64 },
    /// One indicator per sorted level.
    Categorical { levels: Vec<String> },
}

impl ColumnEncoding {
    pub fn width(&self) -> usize {
        match self {
            ColumnEncoding::Numeric { .. } => 1,
            ColumnEncoding::Categorical { levels } => levels.len(),
        }
    }
}

/// Statistics fitted on a training file, reusable on other files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoding {
    pub features: Vec<(String, ColumnEncoding)>,
    pub sensitive: Vec<(String, Vec<String>)>,
    pub label: Option<(String, Vec<String>)>,
}

impl TabularEncoding {
    pub fn feature_dim(&self) -> usize {
        self.features.iter().map(|(_, c)| c.width()).sum()
    }

    /// Size of the cross product of sensitive levels.
    pub fn num_sensitive(&self) -> usize {
        self.sensitive.iter().map(|(_, l)| l.len()).product()
    }
}

fn sorted_levels<'a>(cells: impl Iterator<Item = &'a str>) -> Vec<String> {
    cells.map(str::to_owned).collect::<BTreeSet<_>>().into_iter().collect()
}

fn level_index(levels: &[String], cell: &str, row: usize, column: &str) -> Result<usize> {
    levels
        .binary_search_by(|l| l.as_str().cmp(cell))
        .map_err(|_| Error::Data(format!("row {row}, column {column}: unknown level {cell:?}")))
}

/// Reads `path`, encoding it with `encoding` when given or with statistics
/// fitted on this file otherwise. Returns the batch and the encoding used.
pub fn load_tabular_csv(
    path: &Path,
    schema: &TabularSchema,
    encoding: Option<&TabularEncoding>,
) -> Result<(LabeledBatch, TabularEncoding)> {
    if schema.features.is_empty() || schema.sensitive.is_empty() {
        return Err(Error::Data("schema needs at least one feature and one sensitive column".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let feature_cols = schema.features.iter().map(|n| column(n)).collect::<Result<Vec<_>>>()?;
    let sensitive_cols = schema.sensitive.iter().map(|n| column(n)).collect::<Result<Vec<_>>>()?;
    let label_col = schema.label.as_deref().map(column).transpose()?;
    if let Some(c) = schema.categorical.iter().find(|c| !schema.features.contains(c)) {
        return Err(Error::Data(format!("categorical column {c:?} is not a feature")));
    }

    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    for (i, row) in rows.iter().enumerate() {
        let used = feature_cols.iter().chain(&sensitive_cols).chain(label_col.iter());
        for &c in used {
            if row.get(c).map_or(true, str::is_empty) {
                return Err(Error::Data(format!("row {}, column {}: missing value", i + 1, &headers[c])));
            }
        }
    }
    let parse = |i: usize, c: usize| -> Result<f64> {
        let cell = &rows[i][c];
        cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
            Error::Data(format!("row {}, column {}: cannot parse {cell:?} as a number", i + 1, &headers[c]))
        })
    };

    let fitted;
    let enc = match encoding {
        Some(e) => e,
        None => {
            let mut features = Vec::new();
            for (name, &c) in schema.features.iter().zip(&feature_cols) {
                let enc = if schema.categorical.contains(name) {
                    ColumnEncoding::Categorical { levels: sorted_levels(rows.iter().map(|r| &r[c])) }
                } else {
                    let mut min = f64::INFINITY;
                    let mut max = f64::NEG_INFINITY;
                    for i in 0..rows.len() {
                        let v = parse(i, c)?;
                        min = min.min(v);
                        max = max.max(v);
                    }
                    ColumnEncoding::Numeric { min, max }
                };
                features.push((name.clone(), enc));
            }
            let sensitive = schema
                .sensitive
                .iter()
                .zip(&sensitive_cols)
                .map(|(n, &c)| (n.clone(), sorted_levels(rows.iter().map(|r| &r[c]))))
                .collect();
            let label = schema
                .label
                .as_ref()
                .zip(label_col)
                .map(|(n, c)| (n.clone(), sorted_levels(rows.iter().map(|r| &r[c]))));
            fitted = TabularEncoding { features, sensitive, label };
            &fitted
        }
    };
    if enc.features.len() != feature_cols.len() || enc.sensitive.len() != sensitive_cols.len() {
        return Err(Error::Data("encoding does not match the schema".into()));
    }

    let width = enc.feature_dim();
    let mut data = Vec::with_capacity(rows.len() * width);
    let mut sensitive = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for ((name, ce), &c) in enc.features.iter().zip(&feature_cols) {
            match ce {
                ColumnEncoding::Numeric { min, max } => {
                    let v = parse(i, c)?;
                    let scaled = if max > min { (v - min) / (max - min) } else { 0.0 };
                    data.push(scaled.clamp(0.0, 1.0));
                }
                ColumnEncoding::Categorical { levels } => {
                    let k = level_index(levels, &row[c], i + 1, name)?;
                    data.extend((0..levels.len()).map(|j| if j == k { 1.0 } else { 0.0 }));
                }
            }
        }
        let mut s = 0;
        for ((name, levels), &c) in enc.sensitive.iter().zip(&sensitive_cols) {
            s = s * levels.len() + level_index(levels, &row[c], i + 1, name)?;
        }
        sensitive.push(s);
        if let (Some((name, levels)), Some(c)) = (&enc.label, label_col) {
            labels.push(level_index(levels, &row[c], i + 1, name)?);
        }
    }
    let features = Tensor::new(vec![rows.len(), width], data)?;
    let (labels, num_labels) = match &enc.label {
        Some((_, levels)) if label_col.is_some() => (Some(labels), levels.len()),
        _ => (None, 0),
    };
    let batch = LabeledBatch::new(features, sensitive, enc.num_sensitive(), labels, num_labels)?;
    Ok((batch, enc.clone()))
}
