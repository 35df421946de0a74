pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod io;
pub mod modelselect;
pub mod nets;
pub mod ops;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
