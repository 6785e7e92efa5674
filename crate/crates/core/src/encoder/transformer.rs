use std::sync::Arc;

use candle_core::{DType, Device, IndexOp, Tensor, Var, D};
use rand::Rng;

use super::params::{Init, Params};
use super::{Activation, EncoderConfig};
use crate::corpus::{InputBuilder, ModelInput};
use crate::error::{DrexError, Result};
use crate::tokenizer::{AnyTokenizer, Tokenizer};

/// Hidden states of a padded batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// (batch, max_len, H)
    pub hidden: Tensor,
    pub lengths: Vec<usize>,
}

impl EncodedBatch {
    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Row 0 of every sequence: (batch, H).
    pub fn pooled_first(&self) -> Result<Tensor> {
        Ok(self.hidden.i((.., 0, ..))?.contiguous()?)
    }

    pub fn single(&self, row: usize) -> Result<EncoderOutput> {
        let token_states = self.hidden.i((row, ..self.lengths[row], ..))?.contiguous()?;
        let pooled_first = token_states.i(0)?;
        Ok(EncoderOutput {
            token_states,
            pooled_first,
        })
    }
}

/// Encoding of one input.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// (len, H); row i is T_i.
    pub token_states: Tensor,
    /// C, the state of the first token.
    pub pooled_first: Tensor,
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    fn new<R: Rng>(params: &Params, name: &str, out: usize, inp: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: params.get_or_init(&format!("{name}.weight"), &[out, inp], Init::Normal(std), rng)?,
            bias: params.get_or_init(&format!("{name}.bias"), &[out], Init::Zeros, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, inp) = x.dims3()?;
        let out = self.weight.dim(0)?;
        let y = x
            .reshape((b * l, inp))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((b, l, out))?)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl Norm {
    fn new<R: Rng>(params: &Params, name: &str, h: usize, eps: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: params.get_or_init(&format!("{name}.weight"), &[h], Init::Ones, rng)?,
            bias: params.get_or_init(&format!("{name}.bias"), &[h], Init::Zeros, rng)?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attention_output: Linear,
    attention_norm: Norm,
    intermediate: Linear,
    output: Linear,
    output_norm: Norm,
}

/// BERT-family encoder. Parameter names follow the Hugging Face layout under
/// a caller-chosen prefix so pretrained weights map one to one.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    tokenizer: Arc<AnyTokenizer>,
    word_embeddings: Var,
    position_embeddings: Var,
    token_type_embeddings: Option<Var>,
    embedding_norm: Norm,
    layers: Vec<Layer>,
}

impl TransformerEncoder {
    /// Parameters already present in `params` are reused; missing ones are
    /// drawn from `rng`.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        tokenizer: Arc<AnyTokenizer>,
        params: &Params,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() > config.vocab_size {
            return Err(DrexError::Config(format!(
                "tokenizer has {} entries but the embedding table only {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let h = config.hidden_size;
        let std = config.initializer_range;
        let eps = config.layer_norm_eps;
        let name = |s: &str| format!("{prefix}{s}");

        let word_embeddings = params.get_or_init(
            &name("embeddings.word_embeddings.weight"),
            &[config.vocab_size, h],
            Init::Normal(std),
            rng,
        )?;
        let position_embeddings = params.get_or_init(
            &name("embeddings.position_embeddings.weight"),
            &[config.max_position_embeddings, h],
            Init::Normal(std),
            rng,
        )?;
        let token_type_embeddings = if config.type_vocab_size > 0 {
            Some(params.get_or_init(
                &name("embeddings.token_type_embeddings.weight"),
                &[config.type_vocab_size, h],
                Init::Normal(std),
                rng,
            )?)
        } else {
            None
        };
        let embedding_norm = Norm::new(params, &name("embeddings.LayerNorm"), h, eps, rng)?;

        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let l = |s: &str| name(&format!("encoder.layer.{i}.{s}"));
            let inter = config.intermediate_size;
            layers.push(Layer {
                query: Linear::new(params, &l("attention.self.query"), h, h, std, rng)?,
                key: Linear::new(params, &l("attention.self.key"), h, h, std, rng)?,
                value: Linear::new(params, &l("attention.self.value"), h, h, std, rng)?,
                attention_output: Linear::new(params, &l("attention.output.dense"), h, h, std, rng)?,
                attention_norm: Norm::new(params, &l("attention.output.LayerNorm"), h, eps, rng)?,
                intermediate: Linear::new(params, &l("intermediate.dense"), inter, h, std, rng)?,
                output: Linear::new(params, &l("output.dense"), h, inter, std, rng)?,
                output_norm: Norm::new(params, &l("output.LayerNorm"), h, eps, rng)?,
            });
        }

        Ok(Self {
            config,
            tokenizer,
            word_embeddings,
            position_embeddings,
            token_type_embeddings,
            embedding_norm,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn tokenizer(&self) -> &Arc<AnyTokenizer> {
        &self.tokenizer
    }

    pub fn input_builder(&self) -> InputBuilder {
        InputBuilder::new(self.tokenizer.clone(), self.config.max_length)
    }

    fn dtype(&self) -> DType {
        self.word_embeddings.dtype()
    }

    /// Encode a padded batch. Inputs longer than `max_length` are rejected.
    pub fn forward(&self, batch: &[&ModelInput]) -> Result<EncodedBatch> {
        if batch.is_empty() {
            return Err(DrexError::Input("empty batch".into()));
        }
        let lengths: Vec<usize> = batch.iter().map(|x| x.len()).collect();
        for &len in &lengths {
            if len > self.config.max_length {
                return Err(DrexError::Length {
                    len,
                    max: self.config.max_length,
                });
            }
            if len == 0 {
                return Err(DrexError::Input("empty input".into()));
            }
        }
        let b = batch.len();
        let l = *lengths.iter().max().unwrap();
        let h = self.config.hidden_size;
        let dev = Device::Cpu;
        let pad = self.tokenizer.special_ids().pad;

        let mut ids = Vec::with_capacity(b * l);
        let mut key_bias = Vec::with_capacity(b * l);
        for x in batch {
            ids.extend_from_slice(&x.token_ids);
            ids.extend(std::iter::repeat_n(pad, l - x.len()));
            key_bias.extend(std::iter::repeat_n(0f64, x.len()));
            key_bias.extend(std::iter::repeat_n(-1e9f64, l - x.len()));
        }
        let ids = Tensor::from_vec(ids, b * l, &dev)?;
        let positions: Vec<u32> = (0..l as u32)
            .map(|p| p + self.config.position_offset as u32)
            .collect();
        let positions = Tensor::from_vec(positions, l, &dev)?;

        let words = self.word_embeddings.index_select(&ids, 0)?.reshape((b, l, h))?;
        let pos = self.position_embeddings.index_select(&positions, 0)?;
        let mut x = words.broadcast_add(&pos)?;
        if let Some(tt) = &self.token_type_embeddings {
            x = x.broadcast_add(&tt.i(0)?)?;
        }
        let mut x = self.embedding_norm.forward(&x)?;

        let key_bias = Tensor::from_vec(key_bias, (b, 1, 1, l), &dev)?.to_dtype(self.dtype())?;
        for layer in &self.layers {
            x = self.layer_forward(layer, &x, &key_bias)?;
        }
        Ok(EncodedBatch { hidden: x, lengths })
    }

    fn layer_forward(&self, layer: &Layer, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, l, h) = x.dims3()?;
        let heads = self.config.num_heads;
        let hd = h / heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(layer.query.forward(x)?)?;
        let k = split(layer.key.forward(x)?)?;
        let v = split(layer.value.forward(x)?)?;

        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = scores.broadcast_add(key_bias)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, h))?;

        let attn = layer.attention_output.forward(&ctx)?;
        let x = layer.attention_norm.forward(&(x + attn)?)?;
        let inter = layer.intermediate.forward(&x)?;
        let inter = match self.config.activation {
            Activation::Gelu => inter.gelu()?,
            Activation::GeluErf => inter.gelu_erf()?,
        };
        let out = layer.output.forward(&inter)?;
        layer.output_norm.forward(&(x + out)?)
    }

    /// Encode one input: token states T_i and pooled C.
    pub fn encode(&self, input: &ModelInput) -> Result<EncoderOutput> {
        self.forward(&[input])?.single(0)
    }
}
