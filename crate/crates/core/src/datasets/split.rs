//! Seeded three-way split into encoder training, probe training and probe
//! evaluation sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// `(train, probe_train, probe_eval)`.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.6, 0.2, 0.2], seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::Parameter(format!("split fractions must be positive: {:?}", self.fractions)));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Shuffled index sets for `n` samples.
    pub fn indices(&self, n: usize) -> Result<[Vec<usize>; 3]> {
        self.validate()?;
        let a = (n as f64 * self.fractions[0]).round() as usize;
        let b = ((n as f64 * self.fractions[1]).round() as usize).min(n.saturating_sub(a));
        let sizes = [a.min(n), b, n.saturating_sub(a + b)];
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            let names = ["train", "probe_train", "probe_eval"];
            return Err(Error::Data(format!("{} split of {n} samples would be empty", names[i])));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let rest = order.split_off(sizes[0]);
        let (pt, pe) = rest.split_at(sizes[1]);
        Ok([order, pt.to_vec(), pe.to_vec()])
    }
}

/// Disjoint, exhaustive `(train, probe_train, probe_eval)` batches.
pub fn split(batch: &LabeledBatch, spec: &SplitSpec) -> Result<[LabeledBatch; 3]> {
    let [a, b, c] = spec.indices(batch.len())?;
    Ok([batch.select(&a), batch.select(&b), batch.select(&c)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_twenty_twenty() {
        let [a, b, c] = SplitSpec::default().indices(100).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_partition() {
        let spec = SplitSpec { fractions: [0.5, 0.25, 0.25], seed: 9 };
        assert_eq!(spec.indices(37).unwrap(), spec.indices(37).unwrap());
        let other = SplitSpec { seed: 10, ..spec };
        assert_ne!(spec.indices(37).unwrap(), other.indices(37).unwrap());
    }

    #[test]
    fn errors() {
        assert!(SplitSpec::default().indices(2).is_err());
        assert!(SplitSpec { fractions: [0.5, 0.5, 0.0], seed: 0 }.indices(10).is_err());
        assert!(SplitSpec { fractions: [0.5, 0.3, 0.3], seed: 0 }.indices(10).is_err());
    }
}
