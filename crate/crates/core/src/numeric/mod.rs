//! Dense tensors, a reverse-mode tape, and the optimizer.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{BnMode, Fault, Graph, RunningStats, Scope, Var, BN_EPSILON, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
