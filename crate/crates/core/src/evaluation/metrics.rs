//! Group fairness metrics, chance level and embedding homogeneity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest empirical class frequency.
pub fn chance_level(targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Data("chance level of an empty target set".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in targets {
        *counts.entry(t).or_default() += 1;
    }
    Ok(*counts.values().max().expect("non-empty") as f64 / targets.len() as f64)
}

fn check_binary(name: &str, v: &[usize]) -> Result<()> {
    match v.iter().find(|&&x| x > 1) {
        Some(bad) => Err(Error::Parameter(format!("{name} must be binary, found {bad}"))),
        None => Ok(()),
    }
}

/// `Σ_s |P(T=1 | S=s) - P(T=1 | S≠s)|` over rows where `mask` holds, for
/// `s` in `0..num_sensitive`. Groups (or complements) without members are
/// skipped with a warning.
fn disparity_over(
    predictions: &[usize],
    sensitive: &[usize],
    num_sensitive: usize,
    mask: impl Fn(usize) -> bool,
    what: &str,
) -> Result<f64> {
    let mut pos = vec![0usize; num_sensitive];
    let mut count = vec![0usize; num_sensitive];
    for (i, (&t, &s)) in predictions.iter().zip(sensitive).enumerate() {
        if s >= num_sensitive {
            return Err(Error::Parameter(format!("sensitive index {s} outside {num_sensitive} categories")));
        }
        if mask(i) {
            count[s] += 1;
            pos[s] += t;
        }
    }
    let present = count.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Precondition(format!("{what} needs at least two populated sensitive groups")));
    }
    let total_pos: usize = pos.iter().sum();
    let total: usize = count.iter().sum();
    let mut sum = 0.0;
    for s in 0..num_sensitive {
        if count[s] == 0 {
            log::warn!("{what}: sensitive group {s} has no members and is excluded");
            continue;
        }
        let inside = pos[s] as f64 / count[s] as f64;
        let outside = (total_pos - pos[s]) as f64 / (total - count[s]) as f64;
        sum += (inside - outside).abs();
    }
    Ok(sum)
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || b != c {
        return Err(Error::dim("fairness metric", format!("lengths {a}, {b}, {c} differ")));
    }
    Ok(())
}

/// Demographic disparity `Σ_s |P(T=1|S=s) - P(T=1|S≠s)|`.
pub fn demographic_disparity(predictions: &[usize], sensitive: &[usize], num_sensitive: usize) -> Result<f64> {
    check_lengths(predictions.len(), sensitive.len(), sensitive.len())?;
    check_binary("predictions", predictions)?;
    disparity_over(predictions, sensitive, num_sensitive, |_| true, "demographic disparity")
}

/// Summed false-positive-rate gaps `Σ_s |P(T=1|Y=0,S=s) - P(T=1|Y=0,S≠s)|`.
pub fn delta_fpr(predictions: &[usize], labels: &[usize], sensitive: &[usize], num_sensitive: usize) -> Result<f64> {
    check_lengths(predictions.len(), labels.len(), sensitive.len())?;
    check_binary("predictions", predictions)?;
    check_binary("labels", labels)?;
    disparity_over(predictions, sensitive, num_sensitive, |i| labels[i] == 0, "false-positive-rate gap")
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance from each `group_a` row to its `k` nearest `group_b` rows,
/// divided by the mean distance over all pairs of rows in `embedding`.
pub fn homogeneity(embedding: &Tensor, group_a: &[usize], group_b: &[usize], k: usize) -> Result<f64> {
    let n = embedding.rows();
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if group_b.len() < k {
        return Err(Error::Precondition(format!("group_b has {} members, fewer than k = {k}", group_b.len())));
    }
    if group_a.is_empty() {
        return Err(Error::Precondition("group_a is empty".into()));
    }
    if let Some(&bad) = group_a.iter().chain(group_b).find(|&&i| i >= n) {
        return Err(Error::Parameter(format!("index {bad} outside {n} rows")));
    }
    let mut all = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            all += distance(embedding.row(i), embedding.row(j));
        }
    }
    let pairs = n * (n - 1) / 2;
    if pairs == 0 || all == 0.0 {
        return Err(Error::Precondition("all embedded points coincide; homogeneity is 0/0".into()));
    }
    let all = all / pairs as f64;
    let mut total = 0.0;
    let mut dists = Vec::with_capacity(group_b.len());
    for &a in group_a {
        dists.clear();
        dists.extend(group_b.iter().map(|&b| distance(embedding.row(a), embedding.row(b))));
        dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        total += dists[..k].iter().sum::<f64>() / k as f64;
    }
    Ok(total / group_a.len() as f64 / all)
}
