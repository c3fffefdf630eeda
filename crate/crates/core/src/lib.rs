pub mod cli;
pub mod consensus;
pub mod data;
pub mod error;
pub mod nesting;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
