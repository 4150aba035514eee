//! Differentiable primitives. Each op is a method on [`Var`](crate::autodiff::Var)
//! plus, where useful, a plain tensor function.

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod norm;
pub mod shape;

pub use conv::Conv2dSpec;
pub use shape::IndexMap;
