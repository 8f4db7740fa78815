//! Dense f64 tensors, reverse-mode differentiation and AdamW.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{
    argmax, kernels, kl_row, kl_rows, l2, log_softmax_rows, log_sum_exp, rms, softmax_in_place,
    softmax_rows, tv_distance, Tensor, PROB_FLOOR,
};
