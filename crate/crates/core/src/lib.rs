//! Latent-variable non-autoregressive translation on a CPU.
//!
//! The pieces build on each other: [`tensor`] is a define-by-run autodiff
//! engine, [`nn`] has the Transformer blocks, and [`latent`] has the Gaussian
//! sequences, KL terms and the precision-weighted fusion. [`models`] puts
//! these together as the autoregressive teacher, LaNMT and LadderNMT.
//! [`training`], [`data`], [`inference`] and [`analysis`] train, feed,
//! decode and probe them.
//!
//! Everything is generic over [`Scalar`]; the `*32` and `*64` aliases below
//! fix the precision.

pub mod analysis;
pub mod data;
pub mod error;
pub mod inference;
pub mod latent;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations, used for checks against closed forms.
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Graph64<'p> = tensor::Graph<'p, f64>;
pub type GaussianSeq64 = latent::GaussianSeq<f64>;
pub type ModelBundle64 = models::ModelBundle<f64>;
pub type Trainer64 = training::Trainer<f64>;

/// Single-precision instantiations, used for training runs.
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type Graph32<'p> = tensor::Graph<'p, f32>;
pub type GaussianSeq32 = latent::GaussianSeq<f32>;
pub type ModelBundle32 = models::ModelBundle<f32>;
pub type Trainer32 = training::Trainer<f32>;
