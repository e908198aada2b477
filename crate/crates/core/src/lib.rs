pub mod autograd;
pub mod data;
pub mod energy;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod neuron;
pub mod nn;
pub mod optim;
pub mod retrieval;
pub mod ssa;
pub mod swm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
