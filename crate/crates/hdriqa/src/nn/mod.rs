//! Minimal differentiable layer stack: tensors, layers with analytic
//! gradients, Adam, L1 loss, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::Activation;
pub use optim::{AdamConfig, GradBuffer, Param, ParamSet};
pub use tensor::Tensor;
