pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
