//! Float64 reverse-mode differentiation for the model's layers.

mod expm;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;


pub use expm::{expm2x2, expm2x2_vjp};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{sigmoid, softplus, BatchStats, Gradients, Graph, Mode, Var, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::{DiffTensor, Tensor};
