//! Fair representations by binary compression.
//!
//! An encoder maps each record to a short binary code, a decoder rebuilds the
//! record from the code plus the sensitive attribute, and an autoregressive
//! entropy model prices every bit. Raising the price of bits (`beta`) makes
//! the encoder drop whatever the decoder can already recover from the
//! sensitive attribute, which removes that attribute from the code.
//!
//! Modules:
//! - [`nn`]: tensors on a tape, layers, gradients, the optimizer
//! - [`binarizer`]: squash, soft/hard binarization, straight-through gradients
//! - [`entropy`]: causal masked-convolution estimator of the code rate
//! - [`fbc`], [`bvae`]: the binary-code model and the Gaussian comparator
//! - [`datasets`]: DSprites-Unfair, CSV ingestion, synthetic data, splits
//! - [`evaluation`]: probes, fairness metrics, Pareto fronts, rate curves
//! - [`info`]: exact discrete entropies and mutual informations
//! - [`experiment`]: the train / freeze / probe protocol tying it together

pub mod binarizer;
pub mod bvae;
pub mod checkpoint;
pub mod datasets;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fbc;
pub mod info;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
