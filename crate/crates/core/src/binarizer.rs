//! Binarization of real latents: a tanh squash into `(0, 1)`, hard rounding
//! for the forward pass and a soft relaxation whose gradient is used on the
//! way back.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Graph, PointwiseFn, Var};
use crate::tensor::Tensor;

/// Squashed activations with values in `(0, 1)` and the softness used to
/// relax them.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftBits {
    pub values: Tensor,
    pub sigma: f64,
}

/// Hard binary codes, one row of `m` bits per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BitCode {
    bits: Tensor,
}

impl BitCode {
    pub fn new(bits: Tensor) -> Result<Self> {
        if bits.shape().len() != 2 {
            return Err(Error::dim("bit code", format!("expected [n, m], got {:?}", bits.shape())));
        }
        if bits.data().iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::Parameter("bit codes must contain only 0 and 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &Tensor {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> usize {
        self.bits.rows()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = u8> + '_ {
        self.bits.row(i).iter().map(|&b| b as u8)
    }

    /// Rows as bytes, one bit per entry.
    pub fn rows_u8(&self) -> Vec<Vec<u8>> {
        (0..self.samples()).map(|i| self.row(i).collect()).collect()
    }
}

/// `(tanh(e) + 1) / 2`.
pub fn squash_scalar(e: f64) -> f64 {
    (e.tanh() + 1.0) / 2.0
}

pub fn squash(e: &Tensor) -> Tensor {
    e.map(squash_scalar)
}

/// Soft relaxation of one bit:
/// `exp(-σ(z̄-1)²) / (exp(-σ(z̄-1)²) + exp(-σz̄²))`.
///
/// Evaluated through the ratio of the two exponentials, which reduces to
/// `logistic(σ(2z̄ - 1))` but keeps the formula's two terms visible.
pub fn soft_binarize_scalar(zbar: f64, sigma: f64) -> f64 {
    let to_one = -sigma * (zbar - 1.0) * (zbar - 1.0);
    let to_zero = -sigma * zbar * zbar;
    // Divide through by the larger exponential so neither overflows.
    let top = to_one.max(to_zero);
    let a = (to_one - top).exp();
    let b = (to_zero - top).exp();
    a / (a + b)
}

pub fn soft_binarize(zbar: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    Ok(zbar.map(|z| soft_binarize_scalar(z, sigma)))
}

/// Nearest of 0 and 1; ties at exactly 0.5 go to 1.
pub fn hard_binarize_scalar(zbar: f64) -> f64 {
    if zbar >= 0.5 {
        1.0
    } else {
        0.0
    }
}

pub fn hard_binarize(zbar: &Tensor) -> Result<BitCode> {
    BitCode::new(zbar.map(hard_binarize_scalar))
}

/// Derivative of the soft relaxation with respect to `z̄`: `2σ ż (1 - ż)`.
pub fn soft_binarize_derivative(zbar: f64, sigma: f64) -> f64 {
    let s = soft_binarize_scalar(zbar, sigma);
    2.0 * sigma * s * (1.0 - s)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("softness sigma must be positive, got {sigma}")))
    }
}

#[derive(Debug)]
struct Squash;

impl PointwiseFn for Squash {
    fn value(&self, x: f64) -> f64 {
        squash_scalar(x)
    }

    fn derivative(&self, x: f64) -> f64 {
        let t = x.tanh();
        (1.0 - t * t) / 2.0
    }
}

/// Hard value forward, soft-relaxation gradient backward.
#[derive(Debug)]
pub struct StraightThrough {
    sigma: f64,
}

impl StraightThrough {
    pub fn new(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self { sigma })
    }
}

impl PointwiseFn for StraightThrough {
    fn value(&self, x: f64) -> f64 {
        hard_binarize_scalar(x)
    }

    fn derivative(&self, x: f64) -> f64 {
        soft_binarize_derivative(x, self.sigma)
    }
}

/// Records `squash` on a graph.
pub fn squash_var(g: &mut Graph, e: Var) -> Var {
    g.pointwise(e, Arc::new(Squash))
}

/// Records the straight-through binarizer on a graph.
pub fn straight_through(g: &mut Graph, zbar: Var, sigma: f64) -> Result<Var> {
    Ok(g.pointwise(zbar, Arc::new(StraightThrough::new(sigma)?)))
}

/// Closed form of the relaxation, kept for cross-checking.
pub fn logistic_form(zbar: f64, sigma: f64) -> f64 {
    sigmoid(sigma * (2.0 * zbar - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn squash_values() {
        assert_eq!(squash_scalar(0.0), 0.5);
        assert!((squash_scalar(1.0) - 0.8807970779778823).abs() < 1e-15);
        for e in [-3.0, -0.4, 0.01, 2.5] {
            assert!((squash_scalar(e) + squash_scalar(-e) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_binarize_examples() {
        for sigma in [0.1, 1.0, 7.0, 300.0] {
            assert!((soft_binarize_scalar(0.5, sigma) - 0.5).abs() < 1e-15);
        }
        let z = squash_scalar(1.0);
        let v = soft_binarize_scalar(z, 1.0);
        assert!((v - 1.0f64.tanh().exp() / (1.0 + 1.0f64.tanh().exp())).abs() < 1e-12);
        assert!((v - 0.6816997421945262).abs() < 1e-12);
        let (a, b, c) =
            (soft_binarize_scalar(0.9, 1.0), soft_binarize_scalar(0.9, 10.0), soft_binarize_scalar(0.9, 100.0));
        assert!(a < b && b < c && c <= 1.0);
        assert!(1.0 - c < 1e-30);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        assert!(soft_binarize(&t(&[0.2]), 0.0).is_err());
        assert!(StraightThrough::new(-1.0).is_err());
    }

    #[test]
    fn hard_binarize_examples() {
        let code = hard_binarize(&t(&[0.2, 0.8, 0.5])).unwrap();
        assert_eq!(code.bits().data(), &[0.0, 1.0, 1.0]);
        for i in -50..=50 {
            let e = i as f64 * 0.1;
            let bit = hard_binarize_scalar(squash_scalar(e));
            assert_eq!(bit == 1.0, e >= 0.0, "e = {e}");
        }
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let mut g = Graph::new();
        let zbar = g.variable(t(&[0.3, 0.7, 0.5, 1.0]));
        let z = straight_through(&mut g, zbar, 1.0).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 1.0, 1.0, 1.0]);
        let loss = g.sum(z);
        let grad = g.backward(loss).unwrap().get(zbar).unwrap();
        assert!((grad.data()[2] - 0.5).abs() < 1e-15);
        let s1 = sigmoid(1.0);
        assert!((s1 - 0.731058578630005).abs() < 1e-12);
        assert!((grad.data()[3] - 2.0 * s1 * (1.0 - s1)).abs() < 1e-15);
    }

    #[test]
    fn bit_code_rejects_fractions() {
        assert!(BitCode::new(t(&[0.0, 0.4])).is_err());
    }
}
