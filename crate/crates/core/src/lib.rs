pub mod backprop;
pub mod checkpoint;
pub mod costmodel;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod feedback;
pub mod network;
pub mod normal;
pub mod prune;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
