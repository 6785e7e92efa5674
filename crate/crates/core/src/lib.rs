pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod models;
pub mod synthetic;
pub mod system;
pub mod tokenizer;
pub mod train;

pub use error::{DrexError, Result};
