//! Dense `f32` tensors, a reverse-mode tape, optimizers and the MTOK checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tape;
mod tensor;

pub use nn::ParamStore;
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
