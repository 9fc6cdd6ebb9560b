//! Conditional neural video codec with hybrid temporal contexts.
//!
//! Small scales are compensated by flow warping, the original scale by
//! flow-guided deformable sampling with coded residual offsets. Contexts are
//! then refined locally (progressive deformable alignment) and globally
//! (channel cross-attention) before driving a conditional autoencoder with a
//! hyperprior entropy model and a real range-coded bitstream.

pub mod checkpoint;
pub mod codec_core;
pub mod config;
pub mod context_enhance;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod gradcheck;
pub mod hybrid_context;
pub mod motion;
pub mod nn;
pub mod tensor_ops;
pub mod training;

pub use error::{Error, Result};
