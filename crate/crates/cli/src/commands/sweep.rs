use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fbc_core::checkpoint::save_checkpoint;
use fbc_core::evaluation::{
    pareto_front, quantile, rd_curve, rf_curve, write_records_csv, write_records_json, SweepRecord,
};
use fbc_core::experiment::{run_protocol, Method, RunMetrics};
use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_err, csv_writer, finish_csv, parse_method, resolve, write_trace, CHECKPOINT_FILE, TRACE_FILE};
use crate::config::{create_dir, read_json, write_json, RunConfig, SweepSpec, SNAPSHOT_FILE};
use crate::error::{CliError, Result};
use crate::SweepArgs;

/// Written last in a run directory; its presence marks the run complete.
pub const RECORD_FILE: &str = "record.json";
pub const FAILURES_FILE: &str = "failures.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub record: SweepRecord,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub method: Method,
    pub beta: f64,
    pub seed: u64,
    pub error: String,
}

/// Medians over seeds for one (method, β).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub beta: f64,
    pub runs: usize,
    pub rate: f64,
    pub distortion: f64,
    pub a_s: f64,
    pub a_y: f64,
    pub chance_s: f64,
    pub chance_y: Option<f64>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Sorted by method, β, seed.
    pub reports: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<RunFailure>,
    /// Runs found complete on disk and not repeated.
    pub resumed: usize,
}

impl SweepOutcome {
    pub fn records(&self) -> Vec<SweepRecord> {
        self.reports.iter().map(|r| r.record.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct RunKey {
    method: Method,
    beta: f64,
    seed: u64,
}

impl RunKey {
    fn dir_name(&self) -> String {
        format!("{}_b{}_s{}", self.method, self.beta, self.seed)
    }
}

/// Every (method, β, seed) of the grid, each in its own directory under
/// `--out/runs`. Completed runs are skipped, so an interrupted sweep picks
/// up where it stopped. Failed runs are listed in `failures.json` and the
/// rest still finish.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutcome> {
    let mut cfg = resolve(args.config.as_deref(), None, None, args.steps, None, args.data.as_deref())?;
    let mut spec = cfg.sweep.clone().unwrap_or_default();
    if let Some(name) = &args.method {
        let method = parse_method(name)?;
        spec.grids.retain(|g| g.method == method);
    }
    validate(&spec)?;
    cfg.sweep = Some(spec.clone());
    cfg.command = Some("sweep".into());

    create_dir(&args.out)?;
    write_json(&args.out.join(SNAPSHOT_FILE), &cfg)?;
    let mut keys = Vec::new();
    for g in &spec.grids {
        for &beta in &g.betas {
            keys.extend(spec.seeds.iter().map(|&seed| RunKey { method: g.method, beta, seed }));
        }
    }

    let runs = args.out.join("runs");
    create_dir(&runs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    info!("sweep of {} runs", keys.len());
    let results: Vec<(RunKey, Result<(RunReport, bool)>)> = pool
        .install(|| keys.par_iter().map(|&key| (key, run_one(&cfg, &spec, key, &runs.join(key.dir_name())))).collect());

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut resumed = 0;
    for (key, result) in results {
        match result {
            Ok((report, was_done)) => {
                resumed += usize::from(was_done);
                reports.push(report);
            }
            Err(e) => {
                error!("{}: {e}", key.dir_name());
                failures.push(RunFailure { method: key.method, beta: key.beta, seed: key.seed, error: e.to_string() });
            }
        }
    }
    reports.sort_by(|a, b| {
        let (a, b) = (&a.record, &b.record);
        a.method.cmp(&b.method).then(a.beta.total_cmp(&b.beta)).then(a.seed.cmp(&b.seed))
    });
    let summary = summarize(&reports)?;
    let outcome = SweepOutcome { reports, summary, failures, resumed };
    write_outputs(&args.out, &spec, &outcome)?;

    if !outcome.failures.is_empty() {
        return Err(CliError::SweepFailures { failed: outcome.failures.len(), total: keys.len() });
    }
    Ok(outcome)
}

fn validate(spec: &SweepSpec) -> Result<()> {
    if spec.grids.is_empty() || spec.grids.iter().any(|g| g.betas.is_empty()) || spec.seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one method, one beta and one seed".into()));
    }
    if !(spec.bin_width > 0.0) {
        return Err(CliError::Usage(format!("bin width {} must be positive", spec.bin_width)));
    }
    Ok(())
}

/// Returns the run's report and whether it was already on disk.
fn run_one(base: &RunConfig, spec: &SweepSpec, key: RunKey, dir: &Path) -> Result<(RunReport, bool)> {
    let done = dir.join(RECORD_FILE);
    if done.is_file() {
        return Ok((read_json(&done)?, true));
    }
    let mut cfg = base.clone();
    cfg.method = Some(key.method);
    cfg.beta = Some(key.beta);
    cfg.seed = Some(key.seed);
    let source = match spec.data_seed_offset {
        Some(offset) => cfg.data_source().reseeded(offset + key.seed),
        None => cfg.data_source(),
    };
    let data = source.load()?;
    let model = cfg.resolve_model(&data)?;
    let protocol = cfg.protocol();

    create_dir(dir)?;
    let snapshot = RunConfig {
        command: Some("sweep".into()),
        method: Some(key.method),
        model: Some(model.clone()),
        data: Some(source),
        protocol: Some(protocol.clone()),
        ..RunConfig::default()
    };
    write_json(&dir.join(SNAPSHOT_FILE), &snapshot)?;
    let (trained, record, metrics) = run_protocol(key.method, model, &data, &protocol)?;
    write_trace(&dir.join(TRACE_FILE), &trained)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &trained)?;
    let report = RunReport { record, metrics };
    write_json(&dir.join(RECORD_FILE), &report)?;
    info!(
        "{}: rate {:.4}, A_s {:.4}, A_y {:.4}",
        key.dir_name(),
        report.record.rate,
        report.record.a_s,
        report.record.a_y
    );
    Ok((report, false))
}

fn median(values: &[f64]) -> Result<f64> {
    Ok(quantile(values, 0.5)?)
}

pub fn summarize(reports: &[RunReport]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        // Keyed on the bit pattern; betas are non-negative so the order matches numeric order.
        groups.entry((r.record.method.clone(), r.record.beta.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, beta), runs)| {
            let pick = |f: &dyn Fn(&RunReport) -> f64| median(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let chance_y: Vec<f64> = runs.iter().filter_map(|r| r.metrics.chance_y).collect();
            Ok(SummaryRow {
                method,
                beta: f64::from_bits(beta),
                runs: runs.len(),
                rate: pick(&|r| r.record.rate)?,
                distortion: pick(&|r| r.record.distortion)?,
                a_s: pick(&|r| r.record.a_s)?,
                a_y: pick(&|r| r.record.a_y)?,
                chance_s: pick(&|r| r.metrics.chance_s)?,
                chance_y: if chance_y.is_empty() { None } else { Some(median(&chance_y)?) },
            })
        })
        .collect()
}

fn write_outputs(out: &Path, spec: &SweepSpec, outcome: &SweepOutcome) -> Result<()> {
    let records = outcome.records();
    write_records_csv(&out.join("records.csv"), &records)?;
    write_records_json(&out.join("records.json"), &records)?;
    write_json(&out.join(FAILURES_FILE), &outcome.failures)?;

    let path = out.join(SUMMARY_FILE);
    let mut w = csv_writer(&path)?;
    for row in &outcome.summary {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    finish_csv(&path, w)?;

    let mut methods: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    let (pareto, rd, rf) = (out.join("pareto.csv"), out.join("rd.csv"), out.join("rf.csv"));
    let mut pw = csv_writer(&pareto)?;
    let mut dw = csv_writer(&rd)?;
    let mut fw = csv_writer(&rf)?;
    pw.write_record(["method", "a_s_lo", "a_s_hi", "count", "a_y_q75"]).map_err(csv_err(&pareto))?;
    dw.write_record(["method", "distortion", "rate"]).map_err(csv_err(&rd))?;
    fw.write_record(["method", "a_s", "rate"]).map_err(csv_err(&rf))?;
    for method in methods {
        let subset: Vec<SweepRecord> = records.iter().filter(|r| r.method == method).cloned().collect();
        for (lo, hi, count, q) in pareto_front(&subset, spec.bin_width, None)?.bins() {
            pw.write_record([method.to_string(), lo.to_string(), hi.to_string(), count.to_string(), q.to_string()])
                .map_err(csv_err(&pareto))?;
        }
        for (d, r) in rd_curve(&subset) {
            dw.write_record([method.to_string(), d.to_string(), r.to_string()]).map_err(csv_err(&rd))?;
        }
        for (a, r) in rf_curve(&subset) {
            fw.write_record([method.to_string(), a.to_string(), r.to_string()]).map_err(csv_err(&rf))?;
        }
    }
    finish_csv(&pareto, pw)?;
    finish_csv(&rd, dw)?;
    finish_csv(&rf, fw)
}

/// Directory of one run inside a sweep's output.
pub fn run_dir(out: &Path, method: Method, beta: f64, seed: u64) -> PathBuf {
    out.join("runs").join(RunKey { method, beta, seed }.dir_name())
}
