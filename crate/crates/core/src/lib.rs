#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod autograd;
pub mod error;
pub mod fusion;
mod kernels;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod shapes;
pub mod spectral;
pub mod stages;
pub mod tensor;
pub mod testing;
pub mod text;

pub use autograd::{AttnAxis, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
