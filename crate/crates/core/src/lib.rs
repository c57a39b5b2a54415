pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod prompts;
pub mod service;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
