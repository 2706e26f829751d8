//! Dense tensors, reverse-mode gradients, AdamW and a finite-difference checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{AttnGroup, AttnLayout, Grads, Graph, Var, MASK_BIAS};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{InitScheme, Parameter, ParameterStore, INIT_RANGE};
pub use tensor::Tensor;

