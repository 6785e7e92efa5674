//! Loading Hugging Face BERT/RoBERTa checkpoint directories
//! (`config.json`, `tokenizer.json`, `model.safetensors` or `pytorch_model.bin`).

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::Deserialize;

use super::{Activation, EncoderConfig, Params, Precision};
use crate::error::{DrexError, Result};
use crate::tokenizer::{AnyTokenizer, HfTokenizer, SpecialTokens, TokenizerKind};

#[derive(Debug, Deserialize)]
struct HfConfig {
    #[serde(default)]
    model_type: String,
    vocab_size: usize,
    hidden_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    max_position_embeddings: usize,
    #[serde(default)]
    type_vocab_size: usize,
    #[serde(default = "default_eps")]
    layer_norm_eps: f64,
    #[serde(default)]
    hidden_act: Option<String>,
    #[serde(default)]
    pad_token_id: Option<usize>,
    #[serde(default = "default_init")]
    initializer_range: f64,
}

fn default_eps() -> f64 {
    1e-12
}

fn default_init() -> f64 {
    0.02
}

/// Encoder weights read from a checkpoint, keyed by prefix-free names.
pub struct PretrainedEncoder {
    pub config: EncoderConfig,
    pub tokenizer: AnyTokenizer,
    pub weights: BTreeMap<String, Tensor>,
}

impl PretrainedEncoder {
    /// Copy the encoder weights into `params` under `prefix`.
    pub fn install(&self, params: &Params, prefix: &str) -> Result<()> {
        for (name, t) in &self.weights {
            params.insert(&format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }
}

/// Map a checkpoint tensor name onto the encoder layout, or drop it.
fn normalize_name(name: &str) -> Option<String> {
    let name = name
        .strip_prefix("bert.")
        .or_else(|| name.strip_prefix("roberta."))
        .unwrap_or(name);
    if !(name.starts_with("embeddings.") || name.starts_with("encoder.")) {
        return None;
    }
    if name.ends_with("position_ids") {
        return None;
    }
    let name = if let Some(base) = name.strip_suffix("LayerNorm.gamma") {
        format!("{base}LayerNorm.weight")
    } else if let Some(base) = name.strip_suffix("LayerNorm.beta") {
        format!("{base}LayerNorm.bias")
    } else {
        name.to_string()
    };
    Some(name)
}

pub fn load_pretrained(dir: &Path, max_length: Option<usize>, precision: Precision) -> Result<PretrainedEncoder> {
    let err = |message: String| DrexError::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let hf: HfConfig = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
    let roberta = hf.model_type.eq_ignore_ascii_case("roberta");
    let special_tokens = if roberta {
        SpecialTokens::roberta()
    } else {
        SpecialTokens::bert()
    };
    let position_offset = if roberta {
        hf.pad_token_id.unwrap_or(1) + 1
    } else {
        0
    };
    let max_length = max_length
        .unwrap_or(512)
        .min(hf.max_position_embeddings - position_offset);
    let activation = match hf.hidden_act.as_deref() {
        Some("gelu_new") | Some("gelu_pytorch_tanh") => Activation::Gelu,
        _ => Activation::GeluErf,
    };
    let config = EncoderConfig {
        vocab_size: hf.vocab_size,
        hidden_size: hf.hidden_size,
        num_layers: hf.num_hidden_layers,
        num_heads: hf.num_attention_heads,
        intermediate_size: hf.intermediate_size,
        max_length,
        checkpoint: Some(
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
        ),
        special_tokens,
        tokenizer: TokenizerKind::HuggingFace,
        layer_norm_eps: hf.layer_norm_eps,
        type_vocab_size: hf.type_vocab_size,
        position_offset,
        max_position_embeddings: hf.max_position_embeddings,
        activation,
        precision,
        initializer_range: hf.initializer_range,
    };
    config.validate()?;

    let tokenizer = AnyTokenizer::HuggingFace(HfTokenizer::from_file(
        dir.join("tokenizer.json"),
        &config.special_tokens,
    )?);

    let raw: Vec<(String, Tensor)> = if dir.join("model.safetensors").exists() {
        candle_core::safetensors::load(dir.join("model.safetensors"), &Device::Cpu)?
            .into_iter()
            .collect()
    } else if dir.join("pytorch_model.bin").exists() {
        candle_core::pickle::read_all(dir.join("pytorch_model.bin"))?
    } else {
        return Err(err("no model.safetensors or pytorch_model.bin".into()));
    };
    let weights: BTreeMap<String, Tensor> = raw
        .into_iter()
        .filter_map(|(name, t)| normalize_name(&name).map(|n| (n, t)))
        .collect();
    if !weights.contains_key("embeddings.word_embeddings.weight") {
        return Err(err("checkpoint lacks embeddings.word_embeddings.weight".into()));
    }
    Ok(PretrainedEncoder {
        config,
        tokenizer,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::normalize_name;

    #[test]
    fn names_are_normalized() {
        assert_eq!(
            normalize_name("bert.embeddings.LayerNorm.gamma").as_deref(),
            Some("embeddings.LayerNorm.weight")
        );
        assert_eq!(
            normalize_name("roberta.encoder.layer.0.output.dense.bias").as_deref(),
            Some("encoder.layer.0.output.dense.bias")
        );
        assert_eq!(normalize_name("lm_head.dense.weight"), None);
        assert_eq!(normalize_name("bert.pooler.dense.weight"), None);
        assert_eq!(normalize_name("bert.embeddings.position_ids"), None);
    }
}
