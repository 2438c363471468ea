//! Minimal dense-tensor numerics with tape-based reverse-mode differentiation.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod param;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, BatchMoments, Gradients, Graph, Var};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::{numel, strides, Tensor};
