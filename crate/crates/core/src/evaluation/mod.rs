//! Probes, fairness metrics, Pareto fronts and rate curves.

mod front;
mod metrics;
mod probe;
mod records;

pub use front::{pareto_front, quantile, rd_at, rd_curve, rf_at, rf_curve, ParetoFront, CURVE_POINTS, FRONT_QUANTILE};
pub use metrics::{chance_level, delta_fpr, demographic_disparity, homogeneity};
pub use probe::{
    auditor_accuracy, default_auditors, default_task_probe, train_probe, Probe, ProbeResult, ProbeSpec,
    MAX_PROBE_WIDTH, MIN_PROBE_WIDTH,
};
pub use records::{read_records_csv, write_records_csv, write_records_json, SweepRecord};
