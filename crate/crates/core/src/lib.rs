//! Plug-and-play ADMM with classical and learned proximal operators for
//! linear inverse problems in imaging.

pub mod datasets;
pub mod error;
mod gemm;
pub mod imagery;
pub mod linops;
pub mod neuralnet;
pub mod priors;
pub mod solvers;
pub mod tensor;
pub mod training;
pub mod wavelets;

pub use error::{Error, Result};
