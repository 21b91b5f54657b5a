//! Multi-view Vision Transformer for four-view mammogram cases.
//!
//! Each of the LCC, RCC, LMLO and RMLO views is patch-embedded and passed
//! through shared local Transformer blocks. The four token sequences are then
//! concatenated and mixed by global blocks before a class-token head.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tensor::Graph`]), plus data loading, a synthetic case generator,
//! cross-validated training and evaluation metrics.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{Arch, Model, ModelConfig, ParamStore, Readout};
pub use tensor::{Graph, Tensor, Var};
