//! Dense f64 tensors with a reverse-mode tape, the selective-scan state-space
//! layer, deformable aggregation and the multi-branch high-resolution network
//! built from them.

pub mod autodiff;
pub mod blocks;
pub mod dcn;
pub mod error;
pub mod layers;
pub mod macs;
pub mod net;
pub mod ops;
pub mod rng;
pub mod sscan;
pub mod tensor;
pub mod tooling;

pub use autodiff::{Gradients, Module, Param, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
