pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flops;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
