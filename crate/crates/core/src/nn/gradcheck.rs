//! Central finite-difference checks of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, LayerSpec, Mode, Network, ParameterSet, Var};
use crate::binarizer::squash_var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Norm-wise relative error `‖a - n‖ / max(‖a‖, ‖n‖)` between the recorded
/// gradient and central differences, one value per input. `build` records a
/// scalar loss from the input leaves.
pub fn gradient_check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*v);
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        errors.push(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale });
    }
    Ok(errors)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("finite")
}

/// Values bounded away from zero, so kinks stay out of reach of the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.1, 1.0).map(|v| if rng_sign(v) { v } else { -v })
}

fn rng_sign(v: f64) -> bool {
    (v * 1e6) as i64 % 2 == 0
}

/// `sum(out ⊙ weights)` with fixed random weights.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let p = g.mul_const(out, weights)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let w = |r: &mut ChaCha8Rng, shape: &[usize]| uniform(r, shape, -1.0, 1.0);
    let mut out: Vec<Case> = Vec::new();

    let proj = w(r, &[3, 5]);
    out.push((
        "dense",
        vec![w(r, &[3, 4]), w(r, &[5, 4]), w(r, &[5])],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, &proj)
        }),
    ));
    let proj = w(r, &[2, 3, 5, 5]);
    out.push((
        "conv2d (k3, s1, p1)",
        vec![w(r, &[2, 2, 5, 5]), w(r, &[3, 2, 3, 3]), w(r, &[3])],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, &proj)
        }),
    ));
    let proj = w(r, &[1, 2, 4, 4]);
    out.push((
        "conv2d (k4, s2, p1)",
        vec![w(r, &[1, 2, 8, 8]), w(r, &[2, 2, 4, 4]), w(r, &[2])],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, &proj)
        }),
    ));
    let proj = w(r, &[2, 2, 6, 6]);
    out.push((
        "conv_transpose2d (k4, s2, p1)",
        vec![w(r, &[2, 3, 3, 3]), w(r, &[3, 2, 4, 4]), w(r, &[2])],
        Box::new(move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, &proj)
        }),
    ));
    let proj = w(r, &[6, 3]);
    out.push((
        "batch_norm [n, c]",
        vec![w(r, &[6, 3]), uniform(r, &[3], 0.5, 1.5), w(r, &[3])],
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None)?;
            project(g, y, &proj)
        }),
    ));
    let proj = w(r, &[3, 2, 3, 3]);
    out.push((
        "batch_norm [n, c, h, w]",
        vec![w(r, &[3, 2, 3, 3]), uniform(r, &[2], 0.5, 1.5), w(r, &[2])],
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None)?;
            project(g, y, &proj)
        }),
    ));
    for (name, which) in [("relu", 0), ("tanh", 1), ("sigmoid", 2), ("squash", 3)] {
        let proj = w(r, &[4, 5]);
        out.push((
            name,
            vec![off_zero(r, &[4, 5])],
            Box::new(move |g, v| {
                let y = match which {
                    0 => g.relu(v[0]),
                    1 => g.tanh(v[0]),
                    2 => g.sigmoid(v[0]),
                    _ => squash_var(g, v[0]),
                };
                project(g, y, &proj)
            }),
        ));
    }
    let proj = w(r, &[3, 4]);
    out.push((
        "concat_cols / slice_cols",
        vec![w(r, &[3, 2]), w(r, &[3, 5])],
        Box::new(move |g, v| {
            let c = g.concat_cols(v[0], v[1])?;
            let s = g.slice_cols(c, 1, 4)?;
            project(g, s, &proj)
        }),
    ));
    let proj = w(r, &[2, 1, 3, 3]);
    out.push((
        "embed_grid",
        vec![w(r, &[2, 7])],
        Box::new(move |g, v| {
            let y = g.embed_grid(v[0], 3)?;
            project(g, y, &proj)
        }),
    ));
    let target = uniform(r, &[4, 3], 0.0, 1.0);
    out.push(("mean_squared_error", vec![w(r, &[4, 3])], Box::new(move |g, v| g.mean_squared_error(v[0], &target))));
    let target = uniform(r, &[4, 3], 0.0, 1.0).map(f64::round);
    out.push((
        "bce_with_logits",
        vec![w(r, &[4, 3]).map(|x| 3.0 * x)],
        Box::new(move |g, v| g.bce_with_logits(v[0], &target)),
    ));
    let active = vec![true, true, true, true, true, false, false, false, false];
    out.push((
        "bit_cross_entropy",
        vec![uniform(r, &[2, 1, 3, 3], 0.1, 0.9), uniform(r, &[2, 1, 3, 3], 0.05, 0.95)],
        Box::new(move |g, v| g.bit_cross_entropy(v[0], v[1], &active)),
    ));
    let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
    out.push((
        "softmax_cross_entropy",
        vec![w(r, &[5, 4]).map(|x| 2.0 * x)],
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
    ));
    out.push(("kl_std_normal", vec![w(r, &[3, 4]), w(r, &[3, 4])], Box::new(|g, v| g.kl_std_normal(v[0], v[1]))));
    let noise = w(r, &[3, 4]);
    let proj = w(r, &[3, 4]);
    out.push((
        "gaussian_sample",
        vec![w(r, &[3, 4]), w(r, &[3, 4])],
        Box::new(move |g, v| {
            let z = g.gaussian_sample(v[0], v[1], &noise)?;
            project(g, z, &proj)
        }),
    ));
    let c = w(r, &[3, 4]);
    out.push((
        "add / sub / mul / scale / mean",
        vec![w(r, &[3, 4]), w(r, &[3, 4])],
        Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let m = g.mul(a, b)?;
            let s = g.scale(m, 0.7);
            let k = g.mul_const(s, &c)?;
            Ok(g.mean(k))
        }),
    ));
    let net = Network::new(
        "net",
        vec![
            LayerSpec::conv(1, 2, 4, 2),
            LayerSpec::BatchNorm { features: 2 },
            LayerSpec::Tanh,
            LayerSpec::Flatten,
            LayerSpec::dense(8, 3),
        ],
    )
    .expect("valid layers");
    let mut params = ParameterSet::new();
    net.init(&mut params, r);
    let proj = w(r, &[3, 3]);
    out.push((
        "network input (train mode)",
        vec![w(r, &[3, 1, 4, 4])],
        Box::new(move |g, v| {
            let y = net.forward(g, &params, v[0], Mode::Train)?;
            project(g, y, &proj)
        }),
    ));
    out
}

/// Runs every layer and loss check; returns `(name, worst relative error)`.
pub fn layer_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, inputs, build) in cases(seed) {
        let errs = gradient_check(&inputs, DEFAULT_STEP, build)?;
        let worst = errs.into_iter().fold(0.0, f64::max);
        if !worst.is_finite() {
            return Err(Error::NonFinite { what: format!("gradient check of {name}"), detail: "NaN error".into() });
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}
