//! Gaussian comparator: the same encoder trunk with a `2m`-wide head for the
//! posterior mean and log-variance, reparameterized sampling, a KL penalty
//! towards `N(0, I)` and the same sensitive side channel into the decoder.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::LabeledBatch;
use crate::error::{Error, Result};
use crate::fbc::{
    apply_step, check_batch, check_decoder, check_output, chunks, distortion_node, draw_batch, output_values, rngs,
    FbcConfig, LossTerms, TraceRow,
};
use crate::nn::{Graph, LayerSpec, Mode, Network, ParameterSet, Var};
use crate::tensor::Tensor;

/// Diagonal Gaussian posterior; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::dim("posterior", format!("mu {:?} vs log_var {:?}", mu.shape(), log_var.shape())));
        }
        if !log_var.all_finite() || log_var.data().iter().any(|lv| (0.5 * lv).exp() <= 0.0) {
            return Err(Error::NonFinite {
                what: "posterior".into(),
                detail: "log-variance must give a finite, positive deviation".into(),
            });
        }
        Ok(Self { mu, log_var })
    }

    pub fn std_dev(&self) -> Tensor {
        self.log_var.map(|lv| (0.5 * lv).exp())
    }
}

/// `½ Σ (μ² + σ² - ln σ² - 1)` over every entry (nats).
pub fn kl_to_prior(post: &GaussianPosterior) -> f64 {
    post.mu.data().iter().zip(post.log_var.data()).map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0)).sum()
}

/// `μ + σ ⊙ noise`.
pub fn sample(post: &GaussianPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != post.mu.shape() {
        return Err(Error::dim("posterior sample", format!("noise {:?} vs mu {:?}", noise.shape(), post.mu.shape())));
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(noise.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(post.mu.shape().to_vec(), data)
}

/// The encoder stack with its final dense layer widened from `m` to `2m`.
pub fn posterior_encoder(config: &FbcConfig) -> Result<Vec<LayerSpec>> {
    let mut layers = config.encoder.clone();
    match layers.last_mut() {
        Some(LayerSpec::Dense { outputs, .. }) if *outputs == config.code_bits => {
            *outputs = 2 * config.code_bits;
            Ok(layers)
        }
        _ => Err(Error::Parameter(format!("the encoder must end in a dense layer of width m = {}", config.code_bits))),
    }
}

fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

struct Recorded {
    distortion: Var,
    kl: Var,
    total: Var,
}

#[derive(Clone, Debug)]
pub struct BvaeModel {
    config: FbcConfig,
    encoder: Network,
    decoder: Network,
    params: ParameterSet,
    trace: Vec<TraceRow>,
}

impl BvaeModel {
    pub fn new(config: FbcConfig) -> Result<Self> {
        config.validate_common()?;
        let encoder = Network::new("encoder", posterior_encoder(&config)?)?;
        check_output(&encoder, &config.input_shape, &[2 * config.code_bits], "encoder")?;
        let decoder = Network::new("decoder", config.decoder.clone())?;
        check_decoder(&decoder, &config)?;
        let (mut rng, _) = rngs(config.seed);
        let mut params = ParameterSet::new();
        encoder.init(&mut params, &mut rng);
        decoder.init(&mut params, &mut rng);
        Ok(Self { config, encoder, decoder, params, trace: Vec::new() })
    }

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

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    fn heads(&self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<(Var, Var)> {
        if x.shape().len() < 2 || x.shape()[1..] != self.config.input_shape[..] {
            return Err(Error::dim(
                "encoder input",
                format!("expected [n, {:?}], got {:?}", self.config.input_shape, x.shape()),
            ));
        }
        let m = self.config.code_bits;
        let xv = g.input(x.clone());
        let h = self.encoder.forward(g, &self.params, xv, mode)?;
        Ok((g.slice_cols(h, 0, m)?, g.slice_cols(h, m, m)?))
    }

    /// `noise = None` decodes from the posterior mean.
    fn record(&self, g: &mut Graph, x: &Tensor, s: &Tensor, noise: Option<&Tensor>, mode: Mode) -> Result<Recorded> {
        let (mu, log_var) = self.heads(g, x, mode)?;
        let z = match noise {
            Some(e) => g.gaussian_sample(mu, log_var, e)?,
            None => mu,
        };
        let sv = g.input(s.clone());
        let zs = g.concat_cols(z, sv)?;
        let out = self.decoder.forward(g, &self.params, zs, mode)?;
        let distortion = distortion_node(g, out, x, self.config.likelihood)?;
        let kl = g.kl_std_normal(mu, log_var)?;
        let wd = g.scale(distortion, self.config.distortion_weight);
        let bk = g.scale(kl, self.config.beta);
        let total = g.add(wd, bk)?;
        Ok(Recorded { distortion, kl, total })
    }

    /// Posterior parameters for `x [n, ...]`.
    pub fn posterior(&self, x: &Tensor) -> Result<GaussianPosterior> {
        let m = self.config.code_bits;
        let mut mu = Vec::with_capacity(x.rows() * m);
        let mut lv = Vec::with_capacity(x.rows() * m);
        for idx in chunks(x.rows()) {
            let mut g = Graph::new();
            let (a, b) = self.heads(&mut g, &x.select_rows(&idx), Mode::Eval)?;
            mu.extend_from_slice(g.value(a).data());
            lv.extend_from_slice(g.value(b).data());
        }
        GaussianPosterior::new(Tensor::new(vec![x.rows(), m], mu)?, Tensor::new(vec![x.rows(), m], lv)?)
    }

    pub fn decode(&self, z: &Tensor, s: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let sv = g.input(s.clone());
        let zs = g.concat_cols(zv, sv)?;
        let out = self.decoder.forward(&mut g, &self.params, zs, Mode::Eval)?;
        Ok(output_values(g.value(out), self.config.likelihood))
    }

    /// Loss terms with the decoder fed the posterior mean; `rate` is the mean KL.
    pub fn loss(&self, x: &Tensor, s: &Tensor) -> Result<LossTerms> {
        if x.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut g = Graph::new();
        let r = self.record(&mut g, x, s, None, Mode::Eval)?;
        Ok(LossTerms {
            total: g.value(r.total).item(),
            distortion: g.value(r.distortion).item(),
            rate: g.value(r.kl).item(),
        })
    }

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

    pub fn train_step(&mut self, x: &Tensor, s: &Tensor, noise: &Tensor, step: usize) -> Result<LossTerms> {
        let mut g = Graph::new();
        let r = self.record(&mut g, x, s, Some(noise), Mode::Train)?;
        let terms = LossTerms {
            total: g.value(r.total).item(),
            distortion: g.value(r.distortion).item(),
            rate: g.value(r.kl).item(),
        };
        if !terms.total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {terms:?}") });
        }
        g.backward_into(r.total, &mut self.params)?;
        apply_step(&mut self.params, &g, self.config.lr, step)?;
        Ok(terms)
    }

    pub fn fit(&mut self, data: &LabeledBatch) -> Result<()> {
        check_batch(&self.config, data)?;
        let (_, mut rng) = rngs(self.config.seed);
        let mut noise_rng = rng.clone();
        noise_rng.set_stream(2);
        let start = self.trace.len();
        let size = self.config.batch_size.min(data.len());
        for step in start + 1..=start + self.config.steps {
            let (x, s) = draw_batch(data, size, &mut rng);
            let noise = standard_normal(&[size, self.config.code_bits], &mut noise_rng);
            let t = self.train_step(&x, &s, &noise, step)?;
            self.trace.push(TraceRow { step, loss: t.total, distortion: t.distortion, rate: t.rate });
        }
        Ok(())
    }
}

pub fn train_bvae(config: FbcConfig, data: &LabeledBatch) -> Result<BvaeModel> {
    let mut model = BvaeModel::new(config)?;
    model.fit(data)?;
    Ok(model)
}
