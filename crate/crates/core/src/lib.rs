pub mod app;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod optimizer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
