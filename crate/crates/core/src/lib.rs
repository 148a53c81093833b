pub mod error;
pub mod periodic;
pub mod matrix;
pub mod zero_structure;
pub use error::{Error, Result};
pub use matrix::{Matrix, Vector};
