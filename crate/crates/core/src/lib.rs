//! Multi-modal factorized bilinear pooling and its rival fusion operators,
//! a small reverse-mode autodiff engine, the co-attention VQA network and
//! the training and benchmarking machinery around them.

pub mod attention;
pub mod bench;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod lstm;
pub mod model;
pub mod session;
pub mod sketch;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
