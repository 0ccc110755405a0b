//! On-disk dataset bundles: a manifest plus either a CSV of features or a
//! binary image pack with a CSV index.
//!
//! Image pack layout: `b"FBCI"`, `u32` count, `u32` resolution (both
//! little-endian), then `count * R * R` bytes, one per pixel, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataKind, LabeledBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_PACK_MAGIC: &[u8; 4] = b"FBCI";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TABLE_FILE: &str = "data.csv";
pub const PACK_FILE: &str = "images.fbci";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DataKind,
    pub samples: usize,
    pub num_sensitive: usize,
    pub num_labels: usize,
    /// `[d]` for tabular data, `[1, R, R]` for images.
    pub sample_shape: Vec<usize>,
    /// Generator name and parameters, if the data was synthesized.
    #[serde(default)]
    pub generator: serde_json::Value,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn label_cell(batch: &LabeledBatch, i: usize) -> String {
    batch.labels.as_ref().map_or(String::new(), |y| y[i].to_string())
}

/// Writes `batch` under `dir` and returns the manifest.
pub fn write_bundle(dir: &Path, batch: &LabeledBatch, generator: serde_json::Value) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        kind: batch.kind(),
        samples: batch.len(),
        num_sensitive: batch.num_sensitive,
        num_labels: batch.num_labels,
        sample_shape: batch.sample_shape().to_vec(),
        generator,
    };
    match batch.kind() {
        DataKind::Tabular => {
            let d = batch.feature_dim();
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
            header.extend(["s".into(), "y".into()]);
            w.write_record(&header)?;
            for i in 0..batch.len() {
                let mut rec: Vec<String> = batch.features.row(i).iter().map(|v| v.to_string()).collect();
                rec.push(batch.sensitive[i].to_string());
                rec.push(label_cell(batch, i));
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            write_file(&dir.join(TABLE_FILE), &bytes)?;
        }
        DataKind::Image => {
            let r = batch.sample_shape()[1];
            let mut pack = Vec::with_capacity(12 + batch.features.len());
            pack.extend_from_slice(IMAGE_PACK_MAGIC);
            pack.extend_from_slice(&(batch.len() as u32).to_le_bytes());
            pack.extend_from_slice(&(r as u32).to_le_bytes());
            pack.extend(batch.features.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
            write_file(&dir.join(PACK_FILE), &pack)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["id", "s", "y"])?;
            for i in 0..batch.len() {
                w.write_record([i.to_string(), batch.sensitive[i].to_string(), label_cell(batch, i)])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            write_file(&dir.join(INDEX_FILE), &bytes)?;
        }
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.write_all(b"\n").expect("writing to a Vec");
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn read_index(path: &Path, cols: (usize, usize), n: usize) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let parse = |c: usize, name: &str| {
            field(c)
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("{}: row {}, column {name}: bad index", path.display(), i + 1)))
        };
        s.push(parse(cols.0, "s")?);
        y.push(if field(cols.1).is_empty() { None } else { Some(parse(cols.1, "y")?) });
    }
    Ok((s, y))
}

fn labels_from(y: Vec<Option<usize>>) -> Result<Option<Vec<usize>>> {
    if y.iter().all(Option::is_none) {
        Ok(None)
    } else {
        y.into_iter()
            .map(|v| v.ok_or_else(|| Error::Data("labels missing for some rows".into())))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(LabeledBatch, DatasetManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let n = manifest.samples;
    let (features, s, y) = match manifest.kind {
        DataKind::Tabular => {
            let d = match manifest.sample_shape.as_slice() {
                [d] => *d,
                other => return Err(Error::Data(format!("tabular sample shape {other:?}"))),
            };
            let path = dir.join(TABLE_FILE);
            let mut reader = csv::Reader::from_path(&path)?;
            let mut data = Vec::with_capacity(n * d);
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                for j in 0..d {
                    let v = rec.get(j).and_then(|c| c.parse::<f64>().ok()).ok_or_else(|| {
                        Error::Data(format!("{}: row {}, column x{j}: bad number", path.display(), i + 1))
                    })?;
                    data.push(v);
                }
            }
            let (s, y) = read_index(&path, (d, d + 1), n)?;
            (Tensor::new(vec![s.len().max(1), d], data)?, s, y)
        }
        DataKind::Image => {
            let path = dir.join(PACK_FILE);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (count, r, pixels) = parse_pack(&bytes).map_err(|m| Error::Data(format!("{}: {m}", path.display())))?;
            if manifest.sample_shape != [1, r, r] {
                return Err(Error::Data(format!("pack resolution {r} disagrees with the manifest")));
            }
            let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
            let (s, y) = read_index(&dir.join(INDEX_FILE), (1, 2), n)?;
            if s.len() != count {
                return Err(Error::Data(format!("index has {} rows but pack has {count} images", s.len())));
            }
            (Tensor::new(vec![count, 1, r, r], data)?, s, y)
        }
    };
    if s.len() != n {
        return Err(Error::Data(format!("manifest promises {n} samples, found {}", s.len())));
    }
    let batch = LabeledBatch::new(features, s, manifest.num_sensitive, labels_from(y)?, manifest.num_labels)?;
    Ok((batch, manifest))
}

fn parse_pack(bytes: &[u8]) -> std::result::Result<(usize, usize, &[u8]), String> {
    if bytes.len() < 12 || &bytes[..4] != IMAGE_PACK_MAGIC {
        return Err("not an image pack".into());
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let r = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != count * r * r {
        return Err(format!("expected {} pixel bytes, found {}", count * r * r, body.len()));
    }
    Ok((count, r, body))
}
