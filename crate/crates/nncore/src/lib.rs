//! Numerical substrate for the distillation models.
//!
//! Everything here is generic over [`Float`] so that the same model code runs
//! in 32-bit for training and in 64-bit when gradients are checked against
//! finite differences.

mod error;
mod float;
pub mod functional;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod sparse;
mod tensor;
pub mod transformer;

pub use error::{NnError, Result};
pub use float::Float;
pub use graph::{AttnSegment, Graph, Var};
pub use optim::{clip_gradients, Adam, AdamConfig, Gradients};
pub use params::{ParamId, ParamStore};
pub use sparse::Csr;
pub use tensor::Tensor;
pub use transformer::{SeqBatch, TransformerConfig};
