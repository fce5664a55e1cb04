//! Desk-scale training laboratory for two-step hidden-space interpolation
//! of original and perturbed text representations, with a cross-entropy plus
//! Jensen-Shannon-divergence consistency objective.

pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod mixer;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tape, Tensor, Var};
