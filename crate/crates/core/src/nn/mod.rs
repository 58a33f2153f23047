//! Deterministic dense-tensor and neural-network core.

pub mod activation;
pub mod adam;
pub mod dense;
pub mod layernorm;
pub mod params;
pub mod tensor;

pub use activation::{sigmoid, softplus, Activation};
pub use adam::{AdamConfig, AdamState};
pub use dense::{stack_backward, stack_forward, DenseGrads, DenseLayer, StackTrace};
pub use layernorm::{LayerNorm, LayerNormGrads};
pub use params::Params;
pub use tensor::Tensor2;
