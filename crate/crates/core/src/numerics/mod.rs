//! Dense tensors, reverse-mode autodiff, loss kernels and the AdamW optimizer.

mod graph;
pub mod kernels;
mod loss;
mod optim;
mod params;
mod tensor;

pub use graph::{AttentionMask, Graph, Var};
pub use loss::{classification_nll, label_smoothed_nll};
pub use optim::{AdamConfig, AdamW, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{softmax, Tensor};
