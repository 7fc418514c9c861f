//! Two-branch micro-expression recognition.
//!
//! The main branch turns the apex-minus-onset difference image into motion
//! features with four continuous-attention blocks; the position-calibration
//! subbranch encodes a 14x14 onset thumbnail with a shallow self-attention
//! encoder. Their sum feeds a linear classifier.
//!
//! Everything runs on the reverse-mode autograd in [`graph`], in `f64`.

pub mod ca;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pc;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use rng::Rng;
pub use tensor::Tensor;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use model::{MmNet, ModelConfig, Prediction};
