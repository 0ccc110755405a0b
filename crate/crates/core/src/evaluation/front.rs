//! Pareto fronts over auditor accuracy and the rate-distortion and
//! rate-fairness curves.

use serde::{Deserialize, Serialize};

use super::SweepRecord;
use crate::error::{Error, Result};

/// Slack when assigning a value to a bin, so values on an edge are not
/// pushed down by rounding.
const BIN_SLACK: f64 = 1e-9;
pub const CURVE_POINTS: usize = 20;
pub const FRONT_QUANTILE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    /// `bins + 1` strictly increasing edges over `A_s`.
    pub edges: Vec<f64>,
    /// Per-bin quantile of `A_y`, `None` for empty bins.
    pub quantiles: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl ParetoFront {
    /// `(lo, hi, count, quantile)` for every non-empty bin.
    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, usize, f64)> + '_ {
        (0..self.counts.len())
            .filter_map(|i| self.quantiles[i].map(|q| (self.edges[i], self.edges[i + 1], self.counts[i], q)))
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!("quantile {q} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Bins `A_s` with the given width and reports the 0.75-quantile of `A_y`
/// per bin. Bins start at `origin`, or at the multiple of `bin_width` just
/// below the smallest `A_s`.
pub fn pareto_front(records: &[SweepRecord], bin_width: f64, origin: Option<f64>) -> Result<ParetoFront> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::Parameter(format!("bin width {bin_width} must be positive")));
    }
    if records.is_empty() {
        return Err(Error::Parameter("Pareto front of no records".into()));
    }
    let min = records.iter().map(|r| r.a_s).fold(f64::INFINITY, f64::min);
    let origin = origin.unwrap_or((min / bin_width + BIN_SLACK).floor() * bin_width);
    let index = |a: f64| ((a - origin) / bin_width + BIN_SLACK).floor();
    if index(min) < 0.0 {
        return Err(Error::Parameter(format!("origin {origin} lies above the smallest A_s {min}")));
    }
    let bins = records.iter().map(|r| index(r.a_s) as usize).max().expect("non-empty") + 1;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for r in records {
        members[index(r.a_s) as usize].push(r.a_y);
    }
    Ok(ParetoFront {
        edges: (0..=bins).map(|k| origin + k as f64 * bin_width).collect(),
        quantiles: members
            .iter()
            .map(|m| (!m.is_empty()).then(|| quantile(m, FRONT_QUANTILE).expect("non-empty")))
            .collect(),
        counts: members.iter().map(Vec::len).collect(),
    })
}

/// Minimum rate among records with distortion at most `d`.
pub fn rd_at(records: &[SweepRecord], d: f64) -> Option<f64> {
    records.iter().filter(|r| r.distortion <= d).map(|r| r.rate).min_by(f64::total_cmp)
}

/// Maximum rate among records with `A_s` at most `delta`.
pub fn rf_at(records: &[SweepRecord], delta: f64) -> Option<f64> {
    records.iter().filter(|r| r.a_s <= delta).map(|r| r.rate).max_by(f64::total_cmp)
}

fn grid(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Vec::new();
    }
    if hi == lo {
        return vec![lo];
    }
    (0..CURVE_POINTS)
        .map(|i| if i + 1 == CURVE_POINTS { hi } else { lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64 })
        .collect()
}

/// `(D, RD(D))` on a grid over the observed distortions.
pub fn rd_curve(records: &[SweepRecord]) -> Vec<(f64, f64)> {
    grid(records.iter().map(|r| r.distortion)).into_iter().filter_map(|d| rd_at(records, d).map(|r| (d, r))).collect()
}

/// `(Δ, RF(Δ))` on a grid over the observed auditor accuracies.
pub fn rf_curve(records: &[SweepRecord]) -> Vec<(f64, f64)> {
    grid(records.iter().map(|r| r.a_s)).into_iter().filter_map(|a| rf_at(records, a).map(|r| (a, r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rate: f64, distortion: f64, a_s: f64, a_y: f64) -> SweepRecord {
        SweepRecord { method: "fbc".into(), beta: 0.0, seed: 0, rate, distortion, a_s, a_y }
    }

    #[test]
    fn front_example() {
        let r = [rec(0.0, 0.0, 0.52, 0.7), rec(0.0, 0.0, 0.55, 0.9), rec(0.0, 0.0, 0.63, 0.8)];
        let f = pareto_front(&r, 0.1, Some(0.5)).unwrap();
        assert_eq!(f.counts, vec![2, 1]);
        assert!((f.quantiles[0].unwrap() - 0.85).abs() < 1e-12);
        assert!((f.quantiles[1].unwrap() - 0.8).abs() < 1e-12);
        let auto = pareto_front(&r, 0.1, None).unwrap();
        assert!((auto.edges[0] - 0.5).abs() < 1e-12);
        assert_eq!(auto.counts, f.counts);
        assert!(pareto_front(&r, 0.0, None).is_err());
        assert!(pareto_front(&r, 0.1, Some(0.6)).is_err());
    }

    #[test]
    fn curve_examples() {
        let r = [rec(2.0, 0.5, 0.6, 0.0), rec(1.0, 0.9, 0.5, 0.0)];
        assert_eq!(rd_at(&r, 1.0), Some(1.0));
        assert_eq!(rd_at(&r, 0.6), Some(2.0));
        assert_eq!(rd_at(&r, 0.1), None);
        assert_eq!(rf_at(&r, 0.55), Some(1.0));
        assert_eq!(rf_at(&r, 0.65), Some(2.0));
        assert_eq!(rf_at(&r, 0.4), None);
        let rd = rd_curve(&r);
        assert_eq!(rd.len(), CURVE_POINTS);
        assert_eq!(rd[0], (0.5, 2.0));
        assert_eq!(rd.last().copied(), Some((0.9, 1.0)));
    }
}
