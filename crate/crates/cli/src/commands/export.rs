use std::path::PathBuf;

use log::info;

use super::probe::load_frozen;
use super::{csv_err, csv_writer, finish_csv, EMBEDDINGS_FILE};
use crate::config::{create_dir, write_json, SNAPSHOT_FILE};
use crate::error::Result;
use crate::ProbeArgs;

/// One CSV row per sample: representation columns `z0..`, then `s` and `y`
/// (`y` left empty for unlabeled data).
pub fn cmd_export_embeddings(args: &ProbeArgs) -> Result<PathBuf> {
    let frozen = load_frozen(args, "export-embeddings")?;
    let z = frozen.model.represent(&frozen.data.features)?;
    let width = z.shape()[1];

    create_dir(&args.out)?;
    write_json(&args.out.join(SNAPSHOT_FILE), &frozen.snapshot)?;
    let path = args.out.join(EMBEDDINGS_FILE);
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = (0..width).map(|k| format!("z{k}")).collect();
    header.extend(["s".to_string(), "y".to_string()]);
    w.write_record(&header).map_err(csv_err(&path))?;
    let labels = frozen.data.labels.as_deref();
    for i in 0..frozen.data.len() {
        let mut row: Vec<String> = z.row(i).iter().map(f64::to_string).collect();
        row.push(frozen.data.sensitive[i].to_string());
        row.push(labels.map_or_else(String::new, |y| y[i].to_string()));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    finish_csv(&path, w)?;
    info!("wrote {} embeddings of width {width} to {}", frozen.data.len(), path.display());
    Ok(path)
}
