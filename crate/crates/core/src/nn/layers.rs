//! Layer descriptions and sequential networks built from them.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mode, RunningUpdate, Var};
use super::kernels::{conv_output_size, conv_transpose_output_size};
use super::params::{glorot_uniform, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// One stage of a sequential network. Convolutions use `(in, out, kernel,
/// stride)` with padding `(kernel - stride) / 2`, so a 4/2 convolution halves
/// the spatial size exactly and its transpose doubles it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    ConvT2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Tanh,
    Sigmoid,
    /// `[n, c, h, w] -> [n, c*h*w]`
    Flatten,
    /// `[n, c*h*w] -> [n, c, h, w]`
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "Linear({inputs}, {outputs})"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride } => {
                write!(f, "Conv({in_channels}, {out_channels}, {kernel}, {stride})")
            }
            LayerSpec::ConvT2d { in_channels, out_channels, kernel, stride } => {
                write!(f, "ConvT2d({in_channels}, {out_channels}, {kernel}, {stride})")
            }
            LayerSpec::BatchNorm { features } => write!(f, "BatchNorm({features})"),
            LayerSpec::Relu => write!(f, "ReLU"),
            LayerSpec::Tanh => write!(f, "Tanh"),
            LayerSpec::Sigmoid => write!(f, "Sigmoid"),
            LayerSpec::Flatten => write!(f, "Flatten"),
            LayerSpec::Unflatten { channels, height, width } => {
                write!(f, "Unflatten({channels}, {height}, {width})")
            }
        }
    }
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride }
    }

    pub fn conv_t(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::ConvT2d { in_channels, out_channels, kernel, stride }
    }

    fn padding(kernel: usize, stride: usize) -> usize {
        (kernel - stride) / 2
    }

    fn validate(&self) -> Result<()> {
        let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs } => positive(&[inputs, outputs]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride }
            | LayerSpec::ConvT2d { in_channels, out_channels, kernel, stride } => {
                positive(&[in_channels, out_channels, kernel, stride]) && kernel >= stride
            }
            LayerSpec::BatchNorm { features } => features > 0,
            LayerSpec::Unflatten { channels, height, width } => positive(&[channels, height, width]),
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid layer {self}: dimensions must be positive and kernel >= stride")))
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [d] if *d == inputs => Ok(vec![outputs]),
                _ => Err(format!("expected [{inputs}], got {input:?}")),
            },
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride } => match input {
                [c, h, w] if *c == in_channels => {
                    let p = Self::padding(kernel, stride);
                    let oh = conv_output_size(*h, kernel, stride, p);
                    let ow = conv_output_size(*w, kernel, stride, p);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                        _ => Err(format!("kernel {kernel} does not fit {h}x{w}")),
                    }
                }
                _ => Err(format!("expected [{in_channels}, h, w], got {input:?}")),
            },
            LayerSpec::ConvT2d { in_channels, out_channels, kernel, stride } => match input {
                [c, h, w] if *c == in_channels => {
                    let p = Self::padding(kernel, stride);
                    let oh = conv_transpose_output_size(*h, kernel, stride, p);
                    let ow = conv_transpose_output_size(*w, kernel, stride, p);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                        _ => Err("padding exceeds output".to_string()),
                    }
                }
                _ => Err(format!("expected [{in_channels}, h, w], got {input:?}")),
            },
            LayerSpec::BatchNorm { features } => match input.first() {
                Some(&c) if c == features && (input.len() == 1 || input.len() == 3) => Ok(input.to_vec()),
                _ => Err(format!("expected {features} channels, got {input:?}")),
            },
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Unflatten { channels, height, width } => match input {
                [d] if *d == channels * height * width => Ok(vec![channels, height, width]),
                _ => Err(format!("expected [{}], got {input:?}", channels * height * width)),
            },
        }
    }
}

/// A named sequential stack of layers. Parameter names are
/// `{prefix}.{index}.{weight|bias|gamma|beta}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    prefix: String,
    layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("network needs at least one layer".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(Self { prefix: prefix.into(), layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, i: usize, what: &str) -> String {
        format!("{}.{i}.{what}", self.prefix)
    }

    fn context(&self, i: usize) -> String {
        format!("{} layer {i} ({})", self.prefix, self.layers[i])
    }

    /// Shape algebra through the whole stack, naming the first layer that
    /// rejects its input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for i in 0..self.layers.len() {
            shape = self.layers[i].output_shape(&shape).map_err(|m| Error::dim(self.context(i), m))?;
        }
        Ok(shape)
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) {
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    params.insert(self.name(i, "weight"), glorot_uniform(&[outputs, inputs], inputs, outputs, rng));
                    params.insert(self.name(i, "bias"), Tensor::zeros(&[outputs]));
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let area = kernel * kernel;
                    params.insert(
                        self.name(i, "weight"),
                        glorot_uniform(
                            &[out_channels, in_channels, kernel, kernel],
                            in_channels * area,
                            out_channels * area,
                            rng,
                        ),
                    );
                    params.insert(self.name(i, "bias"), Tensor::zeros(&[out_channels]));
                }
                LayerSpec::ConvT2d { in_channels, out_channels, kernel, .. } => {
                    let area = kernel * kernel;
                    params.insert(
                        self.name(i, "weight"),
                        glorot_uniform(
                            &[in_channels, out_channels, kernel, kernel],
                            in_channels * area,
                            out_channels * area,
                            rng,
                        ),
                    );
                    params.insert(self.name(i, "bias"), Tensor::zeros(&[out_channels]));
                }
                LayerSpec::BatchNorm { features } => {
                    params.insert(self.name(i, "gamma"), Tensor::full(&[features], 1.0));
                    params.insert(self.name(i, "beta"), Tensor::zeros(&[features]));
                    params.insert_buffer(self.name(i, "running_mean"), Tensor::zeros(&[features]));
                    params.insert_buffer(self.name(i, "running_var"), Tensor::full(&[features], 1.0));
                }
                _ => {}
            }
        }
    }

    /// Records the forward pass of `x [n, ...]` on `g`.
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let sample_shape = g.value(h).shape()[1..].to_vec();
            let n = g.value(h).rows();
            layer.output_shape(&sample_shape).map_err(|m| Error::dim(self.context(i), m))?;
            h = match *layer {
                LayerSpec::Dense { .. } => {
                    let w = g.param(params, &self.name(i, "weight"))?;
                    let b = g.param(params, &self.name(i, "bias"))?;
                    g.linear(h, w, Some(b))?
                }
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    let w = g.param(params, &self.name(i, "weight"))?;
                    let b = g.param(params, &self.name(i, "bias"))?;
                    g.conv2d(h, w, Some(b), stride, LayerSpec::padding(kernel, stride))?
                }
                LayerSpec::ConvT2d { kernel, stride, .. } => {
                    let w = g.param(params, &self.name(i, "weight"))?;
                    let b = g.param(params, &self.name(i, "bias"))?;
                    g.conv_transpose2d(h, w, Some(b), stride, LayerSpec::padding(kernel, stride))?
                }
                LayerSpec::BatchNorm { .. } => {
                    let prefix = format!("{}.{i}", self.prefix);
                    batch_norm_layer(g, params, &prefix, h, mode)?
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::Tanh => g.tanh(h),
                LayerSpec::Sigmoid => g.sigmoid(h),
                LayerSpec::Flatten => {
                    let d: usize = sample_shape.iter().product();
                    g.reshape(h, &[n, d])?
                }
                LayerSpec::Unflatten { channels, height, width } => g.reshape(h, &[n, channels, height, width])?,
            };
        }
        Ok(h)
    }

    /// Eval-mode forward pass on a plain tensor.
    pub fn forward_tensor(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, params, xv, Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}

/// Batch norm over parameters `{prefix}.gamma/beta` with running statistics
/// in the buffers `{prefix}.running_mean/running_var`.
pub(crate) fn batch_norm_layer(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = g.param(params, &format!("{prefix}.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.beta"))?;
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
            if let Some((mean, var)) = stats {
                g.running_updates.push(RunningUpdate { prefix: prefix.to_string(), mean, var });
            }
            Ok(y)
        }
        Mode::Eval => {
            let missing = || Error::Usage(format!("missing running statistics for `{prefix}`"));
            let mean = params.buffer(&format!("{prefix}.running_mean")).ok_or_else(missing)?;
            let var = params.buffer(&format!("{prefix}.running_var")).ok_or_else(missing)?;
            let (y, _) = g.batch_norm(x, gamma, beta, Some((mean.data(), var.data())))?;
            Ok(y)
        }
    }
}

/// Folds the batch statistics recorded on `g` into the running averages.
pub fn commit_running_stats(params: &mut ParameterSet, g: &Graph) {
    for u in &g.running_updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            if let Some(buf) = params.buffer_mut(&format!("{}.{suffix}", u.prefix)) {
                for (r, b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_dense() {
        let net = Network::new("t", vec![LayerSpec::dense(2, 2)]).unwrap();
        let mut params = ParameterSet::new();
        params.insert("t.0.weight", Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        params.insert("t.0.bias", Tensor::zeros(&[2]));
        let y = net.forward_tensor(&params, &Tensor::matrix(1, 2, vec![3., -1.]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3., -1.]);
    }

    #[test]
    fn relu_definition() {
        let net = Network::new("r", vec![LayerSpec::Relu]).unwrap();
        let y = net.forward_tensor(&ParameterSet::new(), &Tensor::matrix(1, 3, vec![-1., 0., 2.]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0., 0., 2.]);
    }

    #[test]
    fn adults_encoder_shape() {
        let net =
            Network::new("enc", vec![LayerSpec::dense(9, 64), LayerSpec::Relu, LayerSpec::dense(64, 10)]).unwrap();
        let mut params = ParameterSet::new();
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        let y = net.forward_tensor(&params, &Tensor::matrix(1, 9, vec![0.5; 9]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
    }

    #[test]
    fn mismatch_names_layer() {
        let net =
            Network::new("enc", vec![LayerSpec::dense(9, 64), LayerSpec::Relu, LayerSpec::dense(32, 10)]).unwrap();
        let err = net.output_shape(&[9]).unwrap_err().to_string();
        assert!(err.contains("enc layer 2 (Linear(32, 10))"), "{err}");
        let mut params = ParameterSet::new();
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        let err = net.forward_tensor(&params, &Tensor::matrix(1, 8, vec![0.0; 8]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("enc layer 0"));
    }

    #[test]
    fn image_stack_shapes() {
        let enc = Network::new(
            "enc",
            vec![
                LayerSpec::conv(1, 32, 4, 2),
                LayerSpec::conv(32, 32, 4, 2),
                LayerSpec::conv(32, 64, 4, 2),
                LayerSpec::conv(64, 64, 4, 2),
                LayerSpec::Flatten,
                LayerSpec::dense(1024, 128),
            ],
        )
        .unwrap();
        assert_eq!(enc.output_shape(&[1, 64, 64]).unwrap(), vec![128]);
        let dec = Network::new(
            "dec",
            vec![
                LayerSpec::dense(28, 128),
                LayerSpec::dense(128, 1024),
                LayerSpec::Unflatten { channels: 64, height: 4, width: 4 },
                LayerSpec::conv_t(64, 64, 4, 2),
                LayerSpec::conv_t(64, 32, 4, 2),
                LayerSpec::conv_t(32, 32, 4, 2),
                LayerSpec::conv_t(32, 1, 4, 2),
            ],
        )
        .unwrap();
        assert_eq!(dec.output_shape(&[28]).unwrap(), vec![1, 64, 64]);
    }

    #[test]
    fn rejects_kernel_smaller_than_stride() {
        assert!(Network::new("x", vec![LayerSpec::conv(1, 1, 2, 3)]).is_err());
        assert!(Network::new("x", vec![LayerSpec::dense(0, 3)]).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let net = Network::new("bn", vec![LayerSpec::BatchNorm { features: 1 }]).unwrap();
        let mut params = ParameterSet::new();
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        net.forward(&mut g, &params, x, Mode::Train).unwrap();
        commit_running_stats(&mut params, &g);
        // mean 2, unbiased var 2
        assert!((params.buffer("bn.0.running_mean").unwrap().item() - 0.2).abs() < 1e-12);
        assert!((params.buffer("bn.0.running_var").unwrap().item() - (0.9 + 0.2)).abs() < 1e-12);
    }
}
