//! Dense fp64 tensors, a reverse-mode differentiation tape, named
//! parameter storage with Adam, and the `PTNS` tensor file format.

pub mod error;
pub mod format;
pub mod func;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use params::{AdamConfig, AdamState, Binding, GradMap, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
