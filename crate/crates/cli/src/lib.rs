//! Library side of the `ctxqa` binary: configuration layering and the
//! command implementations.

pub mod commands;
pub mod config;

pub use config::{resolve, RunConfig, ENV_PREFIX};
