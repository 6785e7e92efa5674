//! Bidirectional transformer encoders behind one interface.
//!
//! The same BERT-family architecture serves both providers: a tiny randomly
//! initialized encoder for desk-scale work, and pretrained BERT/RoBERTa
//! checkpoints whose weights are mapped onto it (see [`pretrained`]).

mod params;
pub mod pretrained;
mod transformer;

use candle_core::DType;
use serde::{Deserialize, Serialize};

pub use params::{Init, Params, Snapshot};
pub use transformer::{EncodedBatch, EncoderOutput, TransformerEncoder};

use crate::error::{DrexError, Result};
use crate::tokenizer::{SpecialTokens, TokenizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation
    Gelu,
    /// exact erf form used by BERT/RoBERTa
    GeluErf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// H
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    /// Longest accepted input; truncation happens before encoding.
    pub max_length: usize,
    /// Name of the pretrained checkpoint, `None` for randomly initialized encoders.
    pub checkpoint: Option<String>,
    pub special_tokens: SpecialTokens,
    pub tokenizer: TokenizerKind,
    pub layer_norm_eps: f64,
    /// 0 disables token-type embeddings.
    pub type_vocab_size: usize,
    /// First position id (RoBERTa starts at padding_idx + 1 = 2).
    pub position_offset: usize,
    pub max_position_embeddings: usize,
    pub activation: Activation,
    pub precision: Precision,
    #[serde(default = "default_init_std")]
    pub initializer_range: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl EncoderConfig {
    /// 2 layers, 2 heads, H = 64, learned positions.
    pub fn tiny(vocab_size: usize, max_length: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 256,
            max_length,
            checkpoint: None,
            special_tokens: SpecialTokens::bert(),
            tokenizer: TokenizerKind::Word,
            layer_norm_eps: 1e-12,
            type_vocab_size: 0,
            position_offset: 0,
            max_position_embeddings: max_length,
            activation: Activation::Gelu,
            precision: Precision::F32,
            initializer_range: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(DrexError::Config(format!(
                "hidden size {} must be positive and divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_length == 0 || self.max_length + self.position_offset > self.max_position_embeddings {
            return Err(DrexError::Config(format!(
                "max length {} does not fit the {} position embeddings",
                self.max_length, self.max_position_embeddings
            )));
        }
        if self.vocab_size == 0 {
            return Err(DrexError::Config("empty vocabulary".into()));
        }
        self.special_tokens.validate()
    }
}
