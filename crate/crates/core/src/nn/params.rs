//! Named parameters, their gradients, adaptive-moment state and
//! non-trainable buffers (batch-norm running statistics).

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
    touched: bool,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { grad: zeros.clone(), first_moment: zeros.clone(), second_moment: zeros, value, step: 0, touched: false }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Parameters are kept in a sorted map so iteration (and serialization) order
/// is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::dim(
                format!("gradient of `{name}`"),
                format!("expected {:?}, got {:?}", p.grad.shape(), grad.shape()),
            ));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
        p.touched = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
            p.touched = false;
        }
    }

    /// One adaptive-moment update of every parameter that received a gradient
    /// since the last step, then clears all gradients.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{name}`"),
                    detail: format!(
                        "entry {i} of shape {:?} is {} (step {})",
                        p.grad.shape(),
                        p.grad.data()[i],
                        p.step
                    ),
                });
            }
        }
        for p in self.params.values_mut() {
            if !p.touched {
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, g) in m.iter_mut().zip(grad) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            }
            let v = p.second_moment.data_mut();
            for (vi, g) in v.iter_mut().zip(grad) {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        self.zero_grad();
        Ok(())
    }
}

/// Uniform fan-in/fan-out initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        p.accumulate_grad("w", &Tensor::scalar(0.0)).unwrap();
        p.adam_step(1e-3).unwrap();
        assert_eq!(p.value("w").unwrap().item(), 0.3);
    }

    #[test]
    fn first_step_is_bias_corrected_lr() {
        let mut p = single(0.0);
        p.accumulate_grad("w", &Tensor::scalar(1.0)).unwrap();
        p.adam_step(1e-3).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.value("w").unwrap().item() - expected).abs() < 1e-15);
        // Repeated unit gradients keep the step at lr.
        for _ in 0..4 {
            p.accumulate_grad("w", &Tensor::scalar(1.0)).unwrap();
            p.adam_step(1e-3).unwrap();
        }
        assert!((p.value("w").unwrap().item() + 5e-3).abs() < 1e-9);
        assert_eq!(p.parameter("w").unwrap().step(), 5);
    }

    #[test]
    fn step_clears_gradients() {
        let mut p = single(1.0);
        p.accumulate_grad("w", &Tensor::scalar(2.0)).unwrap();
        p.adam_step(0.1).unwrap();
        assert_eq!(p.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let mut p = single(2.0);
        let loss = |w: f64| (w - 0.5) * (w - 0.5);
        let before = loss(p.value("w").unwrap().item());
        let w = p.value("w").unwrap().item();
        p.accumulate_grad("w", &Tensor::scalar(2.0 * (w - 0.5))).unwrap();
        p.adam_step(0.01).unwrap();
        assert!(loss(p.value("w").unwrap().item()) < before);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = single(1.0);
        p.accumulate_grad("w", &Tensor::from_parts(vec![1], vec![f64::NAN])).unwrap();
        let err = p.adam_step(0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.value("w").unwrap().item(), 1.0);
    }
}
