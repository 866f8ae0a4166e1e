//! Gated contextual re-embedding on top of a span-extraction reader.
//!
//! Everything differentiable runs on the tape in [`tensor`]; the model
//! pieces are layered on top in dependency order.

pub mod data;
pub mod embedder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod lm;
pub mod model;
pub mod rasor;
pub mod reembed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use tensor::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
