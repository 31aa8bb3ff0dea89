pub mod assignment;
pub mod data;
pub mod error;
pub mod export;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod repro;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
