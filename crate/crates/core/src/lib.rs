pub mod aggregate;
pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod lm;
pub mod mi;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod router;
pub mod run;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
