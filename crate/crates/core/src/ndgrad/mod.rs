//! Reverse-mode automatic differentiation over rank-2 `f64` tensors, plus Adam.
//!
//! The graph is rebuilt for every minibatch. Leaves hold inputs and parameters;
//! every op validates shapes and rejects non-finite results.

mod graph;
mod nn;
mod optim;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use nn::{BoundMlp, Mlp};
pub use optim::{adam_step, AdamState};
pub use tensor::Tensor;
