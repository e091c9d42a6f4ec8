pub mod error;
pub mod eval;
pub mod experiment;
pub mod ingest;
pub mod model;
pub mod stochastic;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
