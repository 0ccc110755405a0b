//! MLP probes trained on frozen representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, LayerSpec, Mode, Network, ParameterSet};
use crate::tensor::Tensor;

pub const MIN_PROBE_WIDTH: usize = 64;
pub const MAX_PROBE_WIDTH: usize = 256;

/// Probe architecture and optimization schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Steps between full-loss checks on the training set.
    pub check_every: usize,
    /// Checks without relative improvement of at least `tolerance` before stopping.
    pub patience: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn new(width: usize, depth: usize) -> Self {
        Self {
            width,
            depth,
            steps: 2000,
            lr: 1e-3,
            batch_size: 128,
            check_every: 100,
            patience: 3,
            tolerance: 1e-3,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_PROBE_WIDTH..=MAX_PROBE_WIDTH).contains(&self.width) {
            return Err(Error::Parameter(format!(
                "probe width {} outside [{MIN_PROBE_WIDTH}, {MAX_PROBE_WIDTH}]",
                self.width
            )));
        }
        if !matches!(self.depth, 2 | 3) {
            return Err(Error::Parameter(format!("probe depth {} not in {{2, 3}}", self.depth)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.check_every == 0 || !(self.lr > 0.0) {
            return Err(Error::Parameter("probe steps, batch size, check interval and lr must be positive".into()));
        }
        Ok(())
    }
}

/// The auditor set whose best held-out accuracy defines `A_s`.
pub fn default_auditors() -> Vec<ProbeSpec> {
    vec![ProbeSpec::new(64, 2), ProbeSpec::new(128, 2), ProbeSpec::new(256, 3)]
}

/// The single task probe used for `A_y`.
pub fn default_task_probe() -> ProbeSpec {
    ProbeSpec::new(128, 2)
}

/// A trained classifier. Inputs are standardized with statistics of the
/// probe training set.
#[derive(Clone, Debug)]
pub struct Probe {
    network: Network,
    params: ParameterSet,
    mean: Vec<f64>,
    scale: Vec<f64>,
    classes: usize,
}

impl Probe {
    pub fn classes(&self) -> usize {
        self.classes
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.shape().len() != 2 || x.shape()[1] != d {
            return Err(Error::dim("probe input", format!("expected [n, {d}], got {:?}", x.shape())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.network.forward_tensor(&self.params, &self.standardize(x)?)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, targets: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != targets.len() || targets.is_empty() {
            return Err(Error::dim(
                "probe accuracy",
                format!("{} predictions for {} targets", pred.len(), targets.len()),
            ));
        }
        Ok(pred.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / targets.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub probe: Probe,
    /// Held-out accuracy.
    pub accuracy: f64,
    pub steps_run: usize,
}

fn as_matrix(x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    x.clone().reshape(&[n, x.row_len()])
}

/// Trains on `(train_x, train_y)` and reports accuracy on `(eval_x, eval_y)`.
pub fn train_probe(
    train_x: &Tensor,
    train_y: &[usize],
    eval_x: &Tensor,
    eval_y: &[usize],
    spec: &ProbeSpec,
) -> Result<ProbeResult> {
    spec.validate()?;
    let (train_x, eval_x) = (as_matrix(train_x)?, as_matrix(eval_x)?);
    let n = train_x.rows();
    if n != train_y.len() || eval_x.rows() != eval_y.len() {
        return Err(Error::dim("probe data", "representations and targets differ in length"));
    }
    if eval_y.is_empty() {
        return Err(Error::Data("empty probe evaluation set".into()));
    }
    if train_x.row_len() != eval_x.row_len() {
        return Err(Error::dim("probe data", "train and eval representations differ in width"));
    }
    let first = train_y[0];
    if train_y.iter().all(|&y| y == first) {
        return Err(Error::DegenerateTarget(format!("all {n} probe training targets equal {first}")));
    }
    let classes = train_y.iter().chain(eval_y).max().copied().unwrap_or(0) + 1;
    let d = train_x.row_len();

    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(train_x.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in scale.iter_mut().zip(train_x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }

    let mut layers = vec![LayerSpec::dense(d, spec.width), LayerSpec::Relu];
    for _ in 1..spec.depth {
        layers.extend([LayerSpec::dense(spec.width, spec.width), LayerSpec::Relu]);
    }
    layers.push(LayerSpec::dense(spec.width, classes));
    let network = Network::new("probe", layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = ParameterSet::new();
    network.init(&mut params, &mut rng);
    let mut probe = Probe { network, params, mean, scale, classes };
    let xs = probe.standardize(&train_x)?;

    let full_loss = |probe: &Probe| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(xs.clone());
        let logits = probe.network.forward(&mut g, &probe.params, x, Mode::Eval)?;
        let loss = g.softmax_cross_entropy(logits, train_y)?;
        Ok(g.value(loss).item())
    };

    let batch = spec.batch_size.min(n);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut steps_run = 0;
    let mut idx = vec![0; batch];
    let mut ys = vec![0; batch];
    for step in 1..=spec.steps {
        for (i, y) in idx.iter_mut().zip(ys.iter_mut()) {
            *i = rng.gen_range(0..n);
            *y = train_y[*i];
        }
        let mut g = Graph::new();
        let x = g.input(xs.select_rows(&idx));
        let logits = probe.network.forward(&mut g, &probe.params, x, Mode::Train)?;
        let loss = g.softmax_cross_entropy(logits, &ys)?;
        g.backward_into(loss, &mut probe.params)?;
        probe.params.adam_step(spec.lr)?;
        steps_run = step;
        if step % spec.check_every == 0 {
            let l = full_loss(&probe)?;
            if l < best * (1.0 - spec.tolerance) {
                best = l;
                stale = 0;
            } else {
                stale += 1;
                if stale >= spec.patience {
                    break;
                }
            }
        }
    }
    let accuracy = probe.accuracy(&eval_x, eval_y)?;
    Ok(ProbeResult { probe, accuracy, steps_run })
}

/// Best held-out accuracy over `specs` at predicting `s`.
pub fn auditor_accuracy(
    train_x: &Tensor,
    train_s: &[usize],
    eval_x: &Tensor,
    eval_s: &[usize],
    specs: &[ProbeSpec],
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Parameter("auditor set is empty".into()));
    }
    let mut best: f64 = 0.0;
    for spec in specs {
        best = best.max(train_probe(train_x, train_s, eval_x, eval_s, spec)?.accuracy);
    }
    Ok(best)
}
