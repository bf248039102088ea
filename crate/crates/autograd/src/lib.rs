//! Minimal reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the tape
//! in reverse and accumulates vector-Jacobian products. Everything is generic
//! over [`Real`] so the same model code runs in `f32` for training and in
//! `f64` for finite-difference checks.

mod graph;
mod optim;
mod real;
mod tensor;

pub use graph::{softmax_rows, softmax_rows_backward, CustomOp, Grads, Graph, Var};
pub use optim::Adam;
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("{0}")]
    Custom(String),
}

pub type Result<T> = std::result::Result<T, Error>;
