//! Minimal differentiable network core.
//!
//! Dense layers, (leaky) ReLU, a fused softmax cross-entropy head, SGD with
//! momentum and weight decay, and a reverse-mode graph that can
//! differentiate its own gradients. Everything is `f64`.

pub mod checkpoint;
pub mod graph;
pub mod net;
pub mod optim;
pub mod params;

pub use graph::{Graph, Var};
pub use net::{
    forward_loss, grad_input, grad_params, logits, loss_and_grad, nested_grad, Batch, Layer, ModelSpec, NetSpec,
};
pub use optim::{adam_step, sgd_step, AdamState, OptimConfig, SgdState};
pub use params::ParamSet;
