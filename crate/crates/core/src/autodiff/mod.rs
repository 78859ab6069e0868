//! Reverse-mode differentiation over `f64` tensors, with exactly the layers
//! the classifiers need, plus Adam and gradient utilities.

pub mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use graph::{BatchNormStats, Graph, LstmWeights, Mode, Var, BATCHNORM_EPS};
pub(crate) use graph::softmax_rows;
pub use optim::{adam_step, clip_gradients, he_init, AdamConfig, ParamStore, Parameter};
pub use tensor::Tensor;
