//! Federated learning with client-side hypernetworks.

pub mod attack;
pub mod cli;
pub mod datakit;
pub mod diffnet;
pub mod error;
pub mod fedsim;
pub mod hypernet;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
