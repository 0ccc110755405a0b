//! Synthetic tabular data with planted task and sensitive signal.
//!
//! A latent `u ~ U(-1, 1)` drives the label `Y ~ Bernoulli(sigmoid(k u))`.
//! Task features are smooth functions of `u`. Sensitive features mix a code
//! of `S` (weight `rho`) with functions of `u` (weight `1 - rho`), so `rho = 0`
//! makes `X` independent of `S`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Everything needed to regenerate the data and reason about its leakage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n: usize,
    pub feature_dim: usize,
    pub num_sensitive: usize,
    pub correlation: f64,
    pub noise: f64,
    pub label_slope: f64,
    pub seed: u64,
    /// `(frequency, phase)` of each task feature; the first is the identity.
    pub task_waves: Vec<(f64, f64)>,
    /// `(frequency, phase)` of the latent part of each sensitive feature.
    pub sensitive_waves: Vec<(f64, f64)>,
    /// Which bit of `S` each sensitive feature encodes.
    pub sensitive_bits: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticTabular {
    pub batch: LabeledBatch,
    pub params: SyntheticParams,
    /// The latent driving `Y`, kept for diagnostics.
    pub latent: Vec<f64>,
}

pub const DEFAULT_NOISE: f64 = 0.05;
pub const DEFAULT_LABEL_SLOPE: f64 = 8.0;

fn wave(u: f64, (freq, phase): (f64, f64)) -> f64 {
    if freq == 0.0 {
        u
    } else {
        (freq * u + phase).sin()
    }
}

/// Generator with the default noise level.
pub fn make_synthetic_unfair_tabular(
    n: usize,
    feature_dim: usize,
    num_sensitive: usize,
    correlation: f64,
    seed: u64,
) -> Result<SyntheticTabular> {
    SyntheticParams::new(n, feature_dim, num_sensitive, correlation, DEFAULT_NOISE, seed)?.generate()
}

impl SyntheticParams {
    pub fn new(
        n: usize,
        feature_dim: usize,
        num_sensitive: usize,
        correlation: f64,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("need at least one sample".into()));
        }
        if feature_dim < 2 || num_sensitive < 2 {
            return Err(Error::Parameter(format!("need d_x >= 2 and d_s >= 2, got {feature_dim} and {num_sensitive}")));
        }
        if !(0.0..=1.0).contains(&correlation) {
            return Err(Error::Parameter(format!("correlation {correlation} outside [0, 1]")));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Parameter(format!("noise {noise} must be a finite non-negative std")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let n_task = feature_dim.div_ceil(2);
        let n_sens = feature_dim - n_task;
        let draw = |rng: &mut ChaCha8Rng| (rng.gen_range(1.0..3.0), rng.gen_range(0.0..std::f64::consts::TAU));
        let mut task_waves = vec![(0.0, 0.0)];
        task_waves.extend((1..n_task).map(|_| draw(&mut rng)));
        let sensitive_waves = (0..n_sens).map(|_| draw(&mut rng)).collect();
        let nbits = usize::BITS as usize - (num_sensitive - 1).leading_zeros() as usize;
        let sensitive_bits = (0..n_sens).map(|j| j % nbits.max(1)).collect();
        Ok(Self {
            n,
            feature_dim,
            num_sensitive,
            correlation,
            noise,
            label_slope: DEFAULT_LABEL_SLOPE,
            seed,
            task_waves,
            sensitive_waves,
            sensitive_bits,
        })
    }

    pub fn generate(&self) -> Result<SyntheticTabular> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let d = self.feature_dim;
        let mut data = Vec::with_capacity(self.n * d);
        let mut sensitive = Vec::with_capacity(self.n);
        let mut labels = Vec::with_capacity(self.n);
        let mut latent = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let s = rng.gen_range(0..self.num_sensitive);
            let u: f64 = rng.gen_range(-1.0..1.0);
            let p = 1.0 / (1.0 + (-self.label_slope * u).exp());
            labels.push(usize::from(rng.gen::<f64>() < p));
            for &w in &self.task_waves {
                data.push(0.5 + 0.45 * wave(u, w) + self.noise * normal.sample(&mut rng));
            }
            for (&w, &bit) in self.sensitive_waves.iter().zip(&self.sensitive_bits) {
                let h = if (s >> bit) & 1 == 1 { 1.0 } else { -1.0 };
                let mix = self.correlation * h + (1.0 - self.correlation) * wave(u, w);
                data.push(0.5 + 0.45 * mix + self.noise * normal.sample(&mut rng));
            }
            sensitive.push(s);
            latent.push(u);
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        let features = Tensor::new(vec![self.n, d], data)?;
        let batch = LabeledBatch::new(features, sensitive, self.num_sensitive, Some(labels), 2)?;
        Ok(SyntheticTabular { batch, params: self.clone(), latent })
    }
}
