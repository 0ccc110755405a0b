//! The binary-code model: encoder, straight-through binarizer, decoder fed
//! with the code and the one-hot sensitive attribute, and a causal entropy
//! model pricing the code.
//!
//! Encoder and decoder minimize `w·D + β·R`, where `D` is the reconstruction
//! loss and `R` the entropy model's cross-entropy in nats. The entropy model
//! minimizes `R` itself in the same optimizer step, so its estimate stays
//! meaningful at every `β`, including `β = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarizer::{squash_var, straight_through, BitCode, SoftBits};
use crate::datasets::{one_hot, LabeledBatch};
use crate::entropy::{EntropyModel, EntropyModelConfig};
use crate::error::{Error, Result};
use crate::nn::{commit_running_stats, sigmoid, Graph, LayerSpec, Mode, Network, ParameterSet, Var};
use crate::tensor::Tensor;

/// Rows per forward pass during inference.
pub(crate) const INFERENCE_CHUNK: usize = 512;
pub const ENTROPY_PREFIX: &str = "entropy";

/// Reconstruction likelihood, which fixes the distortion measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Mean squared error on linear outputs.
    SquaredError,
    /// Mean per-pixel binary cross-entropy on logits.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Adults,
    Compas,
    Heritage,
    Dsprites,
    Synthetic,
    Custom,
}

/// Architecture and optimization settings shared by both model families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbcConfig {
    pub dataset: DatasetKind,
    /// Shape of one sample: `[d]` or `[1, R, R]`.
    pub input_shape: Vec<usize>,
    pub num_sensitive: usize,
    pub code_bits: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub beta: f64,
    /// Softness of the relaxation used for straight-through gradients.
    pub sigma: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub likelihood: Likelihood,
    /// Multiplier on the distortion in the training objective.
    #[serde(default = "default_weight")]
    pub distortion_weight: f64,
    #[serde(default)]
    pub entropy: EntropyModelConfig,
}

fn default_weight() -> f64 {
    1.0
}

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const SYNTHETIC_DISTORTION_WEIGHT: f64 = 600.0;

impl FbcConfig {
    /// Dense encoder `d -> hidden -> m` and decoder `m + d_s -> m -> hidden -> d`.
    pub fn tabular(
        dataset: DatasetKind,
        features: usize,
        num_sensitive: usize,
        code_bits: usize,
        hidden: usize,
    ) -> Self {
        Self {
            dataset,
            input_shape: vec![features],
            num_sensitive,
            code_bits,
            encoder: vec![LayerSpec::dense(features, hidden), LayerSpec::Relu, LayerSpec::dense(hidden, code_bits)],
            decoder: vec![
                LayerSpec::dense(code_bits + num_sensitive, code_bits),
                LayerSpec::Relu,
                LayerSpec::dense(code_bits, hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, features),
            ],
            beta: 0.0,
            sigma: 1.0,
            steps: 1000,
            lr: 1e-3,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            likelihood: Likelihood::SquaredError,
            distortion_weight: 1.0,
            entropy: EntropyModelConfig::default(),
        }
    }

    pub fn adults() -> Self {
        Self { steps: 55_000, lr: 1e-3, ..Self::tabular(DatasetKind::Adults, 9, 10, 10, 64) }
    }

    pub fn compas() -> Self {
        Self { steps: 22_000, lr: 1e-3, ..Self::tabular(DatasetKind::Compas, 6, 4, 8, 16) }
    }

    pub fn heritage() -> Self {
        Self { steps: 55_000, lr: 0.5e-4, ..Self::tabular(DatasetKind::Heritage, 65, 18, 24, 128) }
    }

    /// Desk-scale synthetic preset: 9 features, 4 sensitive groups, 9 bits.
    /// The distortion weight puts `β ∈ [0, 1]` across the whole range from
    /// a full code to a nearly sensitive-free one.
    pub fn synthetic() -> Self {
        Self {
            distortion_weight: SYNTHETIC_DISTORTION_WEIGHT,
            steps: 3000,
            ..Self::tabular(DatasetKind::Synthetic, 9, 4, 9, 64)
        }
    }

    /// Four strided convolutions down to `R/16`, a dense bottleneck to 24
    /// bits, and the mirrored decoder ending in one Bernoulli channel.
    pub fn dsprites(resolution: usize) -> Result<Self> {
        if resolution < 16 || resolution % 16 != 0 {
            return Err(Error::Parameter(format!("resolution {resolution} must be a positive multiple of 16")));
        }
        let side = resolution / 16;
        let flat = 64 * side * side;
        let code_bits = 24;
        let num_sensitive = 4;
        Ok(Self {
            dataset: DatasetKind::Dsprites,
            input_shape: vec![1, resolution, resolution],
            num_sensitive,
            code_bits,
            encoder: vec![
                LayerSpec::conv(1, 32, 4, 2),
                LayerSpec::Relu,
                LayerSpec::conv(32, 32, 4, 2),
                LayerSpec::Relu,
                LayerSpec::conv(32, 64, 4, 2),
                LayerSpec::Relu,
                LayerSpec::conv(64, 64, 4, 2),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(flat, 128),
                LayerSpec::Relu,
                LayerSpec::dense(128, code_bits),
            ],
            decoder: vec![
                LayerSpec::dense(code_bits + num_sensitive, 128),
                LayerSpec::Relu,
                LayerSpec::dense(128, flat),
                LayerSpec::Relu,
                LayerSpec::Unflatten { channels: 64, height: side, width: side },
                LayerSpec::conv_t(64, 64, 4, 2),
                LayerSpec::Relu,
                LayerSpec::conv_t(64, 32, 4, 2),
                LayerSpec::Relu,
                LayerSpec::conv_t(32, 32, 4, 2),
                LayerSpec::Relu,
                LayerSpec::conv_t(32, 1, 4, 2),
            ],
            beta: 0.0,
            sigma: 1.0,
            steps: 270_000,
            lr: 1e-4,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            likelihood: Likelihood::Bernoulli,
            distortion_weight: 1.0,
            entropy: EntropyModelConfig::default(),
        })
    }

    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn decoder_input(&self) -> usize {
        self.code_bits + self.num_sensitive
    }

    /// Scalar settings shared by both model families.
    pub(crate) fn validate_common(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.code_bits == 0 {
            return Err(Error::Parameter("code length must be at least 1".into()));
        }
        if self.num_sensitive == 0 {
            return Err(Error::Parameter("need at least one sensitive category".into()));
        }
        if !(self.lr > 0.0) || !(self.distortion_weight > 0.0) || self.batch_size == 0 {
            return Err(Error::Parameter("lr, distortion weight and batch size must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!("bad input shape {:?}", self.input_shape)));
        }
        Ok(())
    }

    /// Checks that the stacks chain `input -> m` and `m + d_s -> input`.
    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        let encoder = Network::new("encoder", self.encoder.clone())?;
        check_output(&encoder, &self.input_shape, &[self.code_bits], "encoder")?;
        let decoder = Network::new("decoder", self.decoder.clone())?;
        check_decoder(&decoder, self)
    }
}

pub(crate) fn check_output(net: &Network, input: &[usize], expected: &[usize], what: &str) -> Result<()> {
    let out = net.output_shape(input)?;
    if out != expected {
        return Err(Error::dim(what, format!("produces {out:?}, expected {expected:?}")));
    }
    Ok(())
}

pub(crate) fn check_decoder(decoder: &Network, config: &FbcConfig) -> Result<()> {
    if let Some(LayerSpec::Dense { inputs, .. }) = decoder.layers().first() {
        if *inputs != config.decoder_input() {
            return Err(Error::dim(
                "decoder",
                format!(
                    "input width {inputs}, expected m + d_s = {} + {} = {}",
                    config.code_bits,
                    config.num_sensitive,
                    config.decoder_input()
                ),
            ));
        }
    }
    check_output(decoder, &[config.decoder_input()], &config.input_shape, "decoder")
}

pub(crate) fn check_batch(config: &FbcConfig, data: &LabeledBatch) -> Result<()> {
    if data.sample_shape() != config.input_shape.as_slice() {
        return Err(Error::dim(
            "dataset",
            format!("samples of shape {:?}, model expects {:?}", data.sample_shape(), config.input_shape),
        ));
    }
    if data.num_sensitive != config.num_sensitive {
        return Err(Error::dim(
            "dataset",
            format!("{} sensitive categories, model expects {}", data.num_sensitive, config.num_sensitive),
        ));
    }
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    Ok(())
}

/// One row of the training trace. `distortion` is unweighted and `rate` is
/// the train-mode cross-entropy of the batch codes (nats).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub distortion: f64,
    pub rate: f64,
}

/// Records the reconstruction loss of `out` against `target`.
pub(crate) fn distortion_node(g: &mut Graph, out: Var, target: &Tensor, likelihood: Likelihood) -> Result<Var> {
    match likelihood {
        Likelihood::SquaredError => g.mean_squared_error(out, target),
        Likelihood::Bernoulli => g.bce_with_logits(out, target),
    }
}

pub(crate) fn output_values(out: &Tensor, likelihood: Likelihood) -> Tensor {
    match likelihood {
        Likelihood::SquaredError => out.clone(),
        Likelihood::Bernoulli => out.map(sigmoid),
    }
}

/// Uniform minibatch draw with replacement.
pub(crate) fn draw_batch(data: &LabeledBatch, size: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..data.len())).collect();
    let s: Vec<usize> = idx.iter().map(|&i| data.sensitive[i]).collect();
    (data.features.select_rows(&idx), one_hot(&s, data.num_sensitive))
}

pub(crate) fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(1);
    (init, batches)
}

/// Finishes a step: the gradients already sit in `params`. Leaves `params`
/// untouched when anything is non-finite.
pub(crate) fn apply_step(params: &mut ParameterSet, g: &Graph, lr: f64, step: usize) -> Result<()> {
    if let Err(e) = params.adam_step(lr) {
        params.zero_grad();
        return Err(Error::Diverged { step, detail: e.to_string() });
    }
    commit_running_stats(params, g);
    Ok(())
}

pub(crate) fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(INFERENCE_CHUNK).map(move |a| (a..(a + INFERENCE_CHUNK).min(n)).collect())
}

/// `β = γ / (γ + 1)`.
pub fn beta_from_gamma(gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
    }
    if gamma.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma / (gamma + 1.0))
}

/// Loss terms of one batch: `total = w·distortion + β·rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub distortion: f64,
    pub rate: f64,
}

struct Recorded {
    distortion: Var,
    rate: Var,
    total: Var,
}

#[derive(Clone, Debug)]
pub struct FbcModel {
    config: FbcConfig,
    encoder: Network,
    decoder: Network,
    entropy: EntropyModel,
    params: ParameterSet,
    trace: Vec<TraceRow>,
}

impl FbcModel {
    /// A freshly initialized, untrained model.
    pub fn new(config: FbcConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Network::new("encoder", config.encoder.clone())?;
        let decoder = Network::new("decoder", config.decoder.clone())?;
        let entropy = EntropyModel::new(config.entropy, config.code_bits, ENTROPY_PREFIX)?;
        let (mut rng, _) = rngs(config.seed);
        let mut params = ParameterSet::new();
        encoder.init(&mut params, &mut rng);
        decoder.init(&mut params, &mut rng);
        entropy.init(&mut params, &mut rng);
        Ok(Self { config, encoder, decoder, entropy, params, trace: Vec::new() })
    }

    /// Rebuilds a model around stored parameters and trace.
    pub fn from_parts(config: FbcConfig, params: ParameterSet, trace: Vec<TraceRow>) -> Result<Self> {
        let mut model = Self::new(config)?;
        for (name, _) in model.params.iter() {
            if params.get(name).is_none() {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
        }
        model.params = params;
        model.trace = trace;
        Ok(model)
    }

    pub fn config(&self) -> &FbcConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn entropy_model(&self) -> &EntropyModel {
        &self.entropy
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1..] != self.config.input_shape[..] {
            return Err(Error::dim(
                "encoder input",
                format!("expected [n, {:?}], got {:?}", self.config.input_shape, x.shape()),
            ));
        }
        Ok(())
    }

    fn record(&self, g: &mut Graph, x: &Tensor, s: &Tensor, mode: Mode) -> Result<Recorded> {
        self.check_input(x)?;
        let xv = g.input(x.clone());
        let e = self.encoder.forward(g, &self.params, xv, mode)?;
        let zbar = squash_var(g, e);
        let z = straight_through(g, zbar, self.config.sigma)?;
        let sv = g.input(s.clone());
        let zs = g.concat_cols(z, sv)?;
        let out = self.decoder.forward(g, &self.params, zs, mode)?;
        let distortion = distortion_node(g, out, x, self.config.likelihood)?;
        let rate = self.entropy.rate(g, &self.params, z, mode)?;
        let wd = g.scale(distortion, self.config.distortion_weight);
        let br = g.scale(rate, self.config.beta);
        let total = g.add(wd, br)?;
        Ok(Recorded { distortion, rate, total })
    }

    /// `(zbar, z)` for `x [n, ...]`.
    pub fn encode(&self, x: &Tensor) -> Result<(SoftBits, BitCode)> {
        self.check_input(x)?;
        let mut zbar = Vec::with_capacity(x.rows() * self.config.code_bits);
        let mut z = Vec::with_capacity(zbar.capacity());
        for idx in chunks(x.rows()) {
            let mut g = Graph::new();
            let xv = g.input(x.select_rows(&idx));
            let e = self.encoder.forward(&mut g, &self.params, xv, Mode::Eval)?;
            let zb = squash_var(&mut g, e);
            let zv = straight_through(&mut g, zb, self.config.sigma)?;
            zbar.extend_from_slice(g.value(zb).data());
            z.extend_from_slice(g.value(zv).data());
        }
        let shape = vec![x.rows(), self.config.code_bits];
        Ok((
            SoftBits { values: Tensor::new(shape.clone(), zbar)?, sigma: self.config.sigma },
            BitCode::new(Tensor::new(shape, z)?)?,
        ))
    }

    /// Reconstruction from codes and one-hot sensitive rows. Bernoulli models
    /// return pixel probabilities.
    pub fn decode(&self, z: &BitCode, s: &Tensor) -> Result<Tensor> {
        let width = z.len() + s.shape().get(1).copied().unwrap_or(0);
        if s.shape().len() != 2 || s.rows() != z.samples() || width != self.config.decoder_input() {
            return Err(Error::dim(
                "decoder input",
                format!(
                    "code {:?} with sensitive {:?}; expected m + d_s = {} + {} = {} columns",
                    z.bits().shape(),
                    s.shape(),
                    self.config.code_bits,
                    self.config.num_sensitive,
                    self.config.decoder_input()
                ),
            ));
        }
        let mut g = Graph::new();
        let zv = g.input(z.bits().clone());
        let sv = g.input(s.clone());
        let zs = g.concat_cols(zv, sv)?;
        let out = self.decoder.forward(&mut g, &self.params, zs, Mode::Eval)?;
        Ok(output_values(g.value(out), self.config.likelihood))
    }

    /// Loss terms on a batch (eval mode, no parameter change).
    pub fn loss(&self, x: &Tensor, s: &Tensor) -> Result<LossTerms> {
        if x.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut g = Graph::new();
        let r = self.record(&mut g, x, s, Mode::Eval)?;
        Ok(LossTerms {
            total: g.value(r.total).item(),
            distortion: g.value(r.distortion).item(),
            rate: g.value(r.rate).item(),
        })
    }

    /// Mean unweighted distortion and cross-entropy rate over a dataset.
    pub fn evaluate(&self, data: &LabeledBatch) -> Result<LossTerms> {
        check_batch(&self.config, data)?;
        let (mut d, mut r) = (0.0, 0.0);
        for idx in chunks(data.len()) {
            let part = data.select(&idx);
            let t = self.loss(&part.features, &part.sensitive_one_hot())?;
            let w = idx.len() as f64 / data.len() as f64;
            d += t.distortion * w;
            r += t.rate * w;
        }
        Ok(LossTerms { total: self.config.distortion_weight * d + self.config.beta * r, distortion: d, rate: r })
    }

    /// One optimizer step on a batch. Returns train-mode loss terms.
    pub fn train_step(&mut self, x: &Tensor, s: &Tensor, step: usize) -> Result<LossTerms> {
        let mut g = Graph::new();
        let r = self.record(&mut g, x, s, Mode::Train)?;
        let terms = LossTerms {
            total: g.value(r.total).item(),
            distortion: g.value(r.distortion).item(),
            rate: g.value(r.rate).item(),
        };
        if !terms.total.is_finite() || !terms.rate.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {terms:?}") });
        }
        let prefix = format!("{ENTROPY_PREFIX}.");
        let full = g.backward(r.total)?;
        full.accumulate_where(&mut self.params, |n| !n.starts_with(&prefix))?;
        let rate = g.backward(r.rate)?;
        rate.accumulate_where(&mut self.params, |n| n.starts_with(&prefix))?;
        apply_step(&mut self.params, &g, self.config.lr, step)?;
        self.entropy.project(&mut self.params)?;
        Ok(terms)
    }

    /// Runs the configured number of steps, appending to the trace. On
    /// divergence the parameters stay at the last finite step.
    pub fn fit(&mut self, data: &LabeledBatch) -> Result<()> {
        check_batch(&self.config, data)?;
        let (_, mut rng) = rngs(self.config.seed);
        let start = self.trace.len();
        let size = self.config.batch_size.min(data.len());
        for step in start + 1..=start + self.config.steps {
            let (x, s) = draw_batch(data, size, &mut rng);
            let t = self.train_step(&x, &s, step)?;
            self.trace.push(TraceRow { step, loss: t.total, distortion: t.distortion, rate: t.rate });
        }
        Ok(())
    }
}

/// Initializes and fits a model on `data`.
pub fn train(config: FbcConfig, data: &LabeledBatch) -> Result<FbcModel> {
    let mut model = FbcModel::new(config)?;
    model.fit(data)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        for c in [FbcConfig::adults(), FbcConfig::compas(), FbcConfig::heritage(), FbcConfig::synthetic()] {
            c.validate().unwrap();
        }
        FbcConfig::dsprites(16).unwrap().validate().unwrap();
        FbcConfig::dsprites(64).unwrap().validate().unwrap();
        assert_eq!(FbcConfig::adults().decoder[0], LayerSpec::dense(20, 10));
        assert_eq!(FbcConfig::heritage().decoder[0], LayerSpec::dense(42, 24));
        assert_eq!(FbcConfig::dsprites(64).unwrap().decoder_input(), 28);
    }

    #[test]
    fn decoder_width_error_names_sum() {
        let mut c = FbcConfig::adults();
        c.num_sensitive = 9;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("m + d_s"), "{msg}");
    }

    #[test]
    fn encode_and_decode_shapes() {
        let model = FbcModel::new(FbcConfig::adults()).unwrap();
        let x = Tensor::full(&[3, 9], 0.5);
        let (zbar, z) = model.encode(&x).unwrap();
        assert_eq!(z.bits().shape(), &[3, 10]);
        assert!(zbar.values.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(model.encode(&x).unwrap().1, z);
        let s = one_hot(&[0, 4, 9], 10);
        assert_eq!(model.decode(&z, &s).unwrap().shape(), &[3, 9]);
        let msg = model.decode(&z, &one_hot(&[0, 1, 2], 3)).unwrap_err().to_string();
        assert!(msg.contains("= 20"), "{msg}");
        assert!(model.encode(&Tensor::zeros(&[2, 8])).is_err());
    }

    #[test]
    fn beta_zero_total_is_distortion() {
        let model = FbcModel::new(FbcConfig::compas()).unwrap();
        let x = Tensor::full(&[4, 6], 0.3);
        let s = one_hot(&[0, 1, 2, 3], 4);
        let t = model.loss(&x, &s).unwrap();
        assert_eq!(t.total, t.distortion);
        // Untrained entropy model predicts 1/2 for every bit.
        assert!((t.rate - 8.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn gamma_to_beta() {
        assert_eq!(beta_from_gamma(0.0).unwrap(), 0.0);
        assert_eq!(beta_from_gamma(1.0).unwrap(), 0.5);
        assert!(beta_from_gamma(1e9).unwrap() < 1.0);
        assert!(beta_from_gamma(3.0).unwrap() < beta_from_gamma(4.0).unwrap());
        assert!(beta_from_gamma(-1.0).is_err());
    }
}
