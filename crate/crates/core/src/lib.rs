pub mod blocks;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
