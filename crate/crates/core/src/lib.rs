pub mod biasing;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
