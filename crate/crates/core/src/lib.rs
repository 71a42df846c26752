pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod graph;
pub mod ops;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
