pub mod baseline;
pub mod binarization;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod mining;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
