//! Differentiable substrate shared by every learned component.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod network;
pub mod params;
pub mod spectral;
pub mod tensor;

pub use adam::{adam_step, OptimizerState};
pub use graph::{Adjoints, Bound, Graph, Var};
pub use network::{value_and_grad, Activation, Mlp, NetworkSpec};
pub use params::{Gradients, ParameterStore};
pub use spectral::{project_spectral, spectral_norm};
pub use tensor::Tensor;

pub(crate) use graph::scalar;
