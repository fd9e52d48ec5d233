//! Dense tensor engine with reverse-mode differentiation.

mod basic;
mod nn;
mod tape;

pub use basic::{gelu_scalar, sigmoid_scalar, SparseMap, ZERO_SLOT};
pub use nn::{attention_weights, ConvGeom};
pub use tape::{Profile, Gradients, Tape, Var};
