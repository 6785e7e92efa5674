use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum DrexError {
    #[error("parse error at entry {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("unknown relation label `{0}`")]
    Schema(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("span {start}..={end} lies outside the dialogue region {region_start}..{region_end}")]
    Bounds {
        start: usize,
        end: usize,
        region_start: usize,
        region_end: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input of {len} tokens exceeds the encoder maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DrexError> = std::result::Result<T, E>;
