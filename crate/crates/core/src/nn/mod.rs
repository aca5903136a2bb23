//! Differentiable computation substrate: tensors, a reverse-mode tape,
//! dense layers, attention, Adam and a finite-difference checker.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::multihead_attention;
pub use gradcheck::{compare_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{bounded_logvar, linear, Linear, LEAKY_SLOPE, LOGVAR_BOUND};
pub use params::{GradBuffer, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
