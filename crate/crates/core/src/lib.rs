pub mod attention;
pub mod bsm;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod random;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{with_precision, Precision, Tensor};
