pub mod autodiff;
pub mod config;
pub mod cost;
pub mod data;
pub mod davt;
pub mod decoder;
pub mod error;
pub mod features;
pub mod gate;
pub mod gradsuite;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{CatrError, Result};
pub use tensor::Tensor;
