//! Token importance recalibration (TIR) inside a toy dual-encoder
//! vision-language model, with the synthetic cross-domain benchmark and the
//! analysis tooling used to study it.

pub mod adapt;
pub mod analysis;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod numerics;
pub mod stats;
pub mod tir;

pub use error::{Error, Result};
