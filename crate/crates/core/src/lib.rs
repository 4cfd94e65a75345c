pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rollout;
pub mod runtime;
pub mod seeds;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
