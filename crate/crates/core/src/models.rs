//! Encoder + head combinations: the relation model (R and RR), the span
//! model (EX) and the joint model. Each owns its parameters and saves to a
//! checkpoint directory:
//!
//! ```text
//! model.json            kind + relation schema
//! config.json           EncoderConfig
//! vocab.json | tokenizer.json
//! weights.safetensors
//! ```

use std::path::Path;
use std::sync::Arc;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InputBuilder, ModelInput, RelationSchema};
use crate::encoder::pretrained::PretrainedEncoder;
use crate::encoder::{EncoderConfig, Params, TransformerEncoder};
use crate::error::{DrexError, Result};
use crate::heads::{RelationClassifier, RelationScores, SpanBatch, SpanDistribution, SpanExtractor};
use crate::tokenizer::{AnyTokenizer, Tokenizer};

const ENCODER_PREFIX: &str = "backbone.";
const CLASSIFIER: &str = "classifier.weight";
const SPAN: &str = "span";
const WEIGHTS: &str = "weights.safetensors";
/// Rows per forward pass when predicting without gradients.
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Relation,
    Span,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: ModelKind,
    schema: RelationSchema,
}

struct Loaded {
    schema: RelationSchema,
    config: EncoderConfig,
    tokenizer: Arc<AnyTokenizer>,
    params: Params,
}

fn save_checkpoint(dir: &Path, kind: ModelKind, schema: &RelationSchema, encoder: &TransformerEncoder, params: &Params) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = ModelMeta {
        kind,
        schema: schema.clone(),
    };
    std::fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&meta)?)?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(encoder.config())?)?;
    encoder.tokenizer().save_to_dir(dir)?;
    params.save(dir.join(WEIGHTS))
}

fn load_checkpoint(dir: &Path, expected: ModelKind) -> Result<Loaded> {
    let err = |message: String| DrexError::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    if !dir.is_dir() {
        return Err(err("checkpoint directory does not exist".into()));
    }
    let meta: ModelMeta = serde_json::from_slice(&std::fs::read(dir.join("model.json"))?)?;
    if meta.kind != expected {
        return Err(err(format!("expected a {expected:?} model, found {:?}", meta.kind)));
    }
    let config: EncoderConfig = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
    let tokenizer = AnyTokenizer::load_from_dir(dir, config.tokenizer, &config.special_tokens)?;
    let params = Params::load(dir.join(WEIGHTS), config.precision.dtype())?;
    Ok(Loaded {
        schema: meta.schema,
        config,
        tokenizer: Arc::new(tokenizer),
        params,
    })
}

/// Every parameter must already exist when assembling from a checkpoint.
fn strict_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn chunked<T>(
    inputs: &[&ModelInput],
    mut f: impl FnMut(&[&ModelInput]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(PREDICT_CHUNK) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

/// Relation classifier over the pooled first token: used for R and RR.
#[derive(Debug)]
pub struct RelationModel {
    params: Params,
    encoder: TransformerEncoder,
    classifier: RelationClassifier,
    schema: RelationSchema,
}

impl RelationModel {
    pub fn new(config: EncoderConfig, tokenizer: AnyTokenizer, schema: RelationSchema, seed: u64) -> Result<Self> {
        let params = Params::new(config.precision.dtype());
        Self::assemble(config, Arc::new(tokenizer), params, schema, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Pretrained encoder weights with a freshly initialized classifier.
    pub fn from_pretrained(pretrained: &PretrainedEncoder, schema: RelationSchema, seed: u64) -> Result<Self> {
        let params = Params::new(pretrained.config.precision.dtype());
        pretrained.install(&params, ENCODER_PREFIX)?;
        Self::assemble(
            pretrained.config.clone(),
            Arc::new(pretrained.tokenizer.clone()),
            params,
            schema,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn assemble(config: EncoderConfig, tokenizer: Arc<AnyTokenizer>, params: Params, schema: RelationSchema, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = TransformerEncoder::new(config, tokenizer, &params, ENCODER_PREFIX, rng)?;
        let classifier = RelationClassifier::new(&params, CLASSIFIER, schema.len(), encoder.hidden_size(), rng)?;
        Ok(Self {
            params,
            encoder,
            classifier,
            schema,
        })
    }

    /// Independent copy with identical weights.
    pub fn duplicate(&self) -> Result<Self> {
        Self::assemble(
            self.encoder.config().clone(),
            self.encoder.tokenizer().clone(),
            self.params.duplicate()?,
            self.schema.clone(),
            &mut strict_rng(),
        )
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn classifier(&self) -> &RelationClassifier {
        &self.classifier
    }

    pub fn input_builder(&self) -> InputBuilder {
        self.encoder.input_builder()
    }

    /// (batch, K) relation probabilities, differentiable.
    pub fn forward(&self, inputs: &[&ModelInput]) -> Result<Tensor> {
        let encoded = self.encoder.forward(inputs)?;
        self.classifier.forward(&encoded.pooled_first()?)
    }

    pub fn predict(&self, inputs: &[&ModelInput]) -> Result<Vec<RelationScores>> {
        chunked(inputs, |chunk| RelationScores::from_tensor(&self.forward(chunk)?.detach()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir.as_ref(), ModelKind::Relation, &self.schema, &self.encoder, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let l = load_checkpoint(dir.as_ref(), ModelKind::Relation)?;
        let expected = l.params.names().len();
        let model = Self::assemble(l.config, l.tokenizer, l.params, l.schema, &mut strict_rng())?;
        check_complete(dir.as_ref(), expected, &model.params)?;
        Ok(model)
    }
}

fn check_complete(dir: &Path, loaded: usize, params: &Params) -> Result<()> {
    if params.names().len() != loaded {
        return Err(DrexError::Checkpoint {
            path: dir.to_path_buf(),
            message: format!(
                "checkpoint holds {loaded} tensors but the model needs {}",
                params.names().len()
            ),
        });
    }
    Ok(())
}

/// Start/end span extractor: the explanation model EX.
#[derive(Debug)]
pub struct SpanModel {
    params: Params,
    encoder: TransformerEncoder,
    extractor: SpanExtractor,
}

impl SpanModel {
    pub fn new(config: EncoderConfig, tokenizer: AnyTokenizer, seed: u64) -> Result<Self> {
        let params = Params::new(config.precision.dtype());
        Self::assemble(config, Arc::new(tokenizer), params, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_pretrained(pretrained: &PretrainedEncoder, seed: u64) -> Result<Self> {
        let params = Params::new(pretrained.config.precision.dtype());
        pretrained.install(&params, ENCODER_PREFIX)?;
        Self::assemble(
            pretrained.config.clone(),
            Arc::new(pretrained.tokenizer.clone()),
            params,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn assemble(config: EncoderConfig, tokenizer: Arc<AnyTokenizer>, params: Params, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = TransformerEncoder::new(config, tokenizer, &params, ENCODER_PREFIX, rng)?;
        let extractor = SpanExtractor::new(&params, SPAN, encoder.hidden_size(), rng)?;
        Ok(Self {
            params,
            encoder,
            extractor,
        })
    }

    pub fn duplicate(&self) -> Result<Self> {
        Self::assemble(
            self.encoder.config().clone(),
            self.encoder.tokenizer().clone(),
            self.params.duplicate()?,
            &mut strict_rng(),
        )
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    pub fn input_builder(&self) -> InputBuilder {
        self.encoder.input_builder()
    }

    pub fn forward(&self, inputs: &[&ModelInput]) -> Result<SpanBatch> {
        let encoded = self.encoder.forward(inputs)?;
        self.extractor.forward(&encoded.hidden, &encoded.lengths)
    }

    pub fn predict(&self, inputs: &[&ModelInput]) -> Result<Vec<SpanDistribution>> {
        chunked(inputs, |chunk| self.forward(chunk)?.distributions())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        // span models carry no relation schema of their own
        let schema = RelationSchema::new(vec!["span".into()], None)?;
        save_checkpoint(dir.as_ref(), ModelKind::Span, &schema, &self.encoder, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let l = load_checkpoint(dir.as_ref(), ModelKind::Span)?;
        let expected = l.params.names().len();
        let model = Self::assemble(l.config, l.tokenizer, l.params, &mut strict_rng())?;
        check_complete(dir.as_ref(), expected, &model.params)?;
        Ok(model)
    }
}

/// One backbone with both heads. Predicts exactly one span per input,
/// however many relations hold for the pair.
#[derive(Debug)]
pub struct JointModel {
    params: Params,
    encoder: TransformerEncoder,
    classifier: RelationClassifier,
    extractor: SpanExtractor,
    schema: RelationSchema,
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub probs: Tensor,
    pub spans: SpanBatch,
}

impl JointModel {
    pub fn new(config: EncoderConfig, tokenizer: AnyTokenizer, schema: RelationSchema, seed: u64) -> Result<Self> {
        let params = Params::new(config.precision.dtype());
        Self::assemble(config, Arc::new(tokenizer), params, schema, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_pretrained(pretrained: &PretrainedEncoder, schema: RelationSchema, seed: u64) -> Result<Self> {
        let params = Params::new(pretrained.config.precision.dtype());
        pretrained.install(&params, ENCODER_PREFIX)?;
        Self::assemble(
            pretrained.config.clone(),
            Arc::new(pretrained.tokenizer.clone()),
            params,
            schema,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn assemble(config: EncoderConfig, tokenizer: Arc<AnyTokenizer>, params: Params, schema: RelationSchema, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = TransformerEncoder::new(config, tokenizer, &params, ENCODER_PREFIX, rng)?;
        let classifier = RelationClassifier::new(&params, CLASSIFIER, schema.len(), encoder.hidden_size(), rng)?;
        let extractor = SpanExtractor::new(&params, SPAN, encoder.hidden_size(), rng)?;
        Ok(Self {
            params,
            encoder,
            classifier,
            extractor,
            schema,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn input_builder(&self) -> InputBuilder {
        self.encoder.input_builder()
    }

    pub fn forward(&self, inputs: &[&ModelInput]) -> Result<JointOutput> {
        let encoded = self.encoder.forward(inputs)?;
        Ok(JointOutput {
            probs: self.classifier.forward(&encoded.pooled_first()?)?,
            spans: self.extractor.forward(&encoded.hidden, &encoded.lengths)?,
        })
    }

    pub fn predict(&self, inputs: &[&ModelInput]) -> Result<Vec<(RelationScores, SpanDistribution)>> {
        chunked(inputs, |chunk| {
            let out = self.forward(chunk)?;
            let scores = RelationScores::from_tensor(&out.probs.detach())?;
            let dists = out.spans.distributions()?;
            Ok(scores.into_iter().zip(dists).collect())
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir.as_ref(), ModelKind::Joint, &self.schema, &self.encoder, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let l = load_checkpoint(dir.as_ref(), ModelKind::Joint)?;
        let expected = l.params.names().len();
        let model = Self::assemble(l.config, l.tokenizer, l.params, l.schema, &mut strict_rng())?;
        check_complete(dir.as_ref(), expected, &model.params)?;
        Ok(model)
    }
}

/// Same tokenizer family and vocabulary, so inputs built for one model are
/// valid for the other.
pub fn compatible(a: &TransformerEncoder, b: &TransformerEncoder) -> bool {
    a.config().special_tokens == b.config().special_tokens
        && a.tokenizer().vocab_size() == b.tokenizer().vocab_size()
        && a.tokenizer().special_ids() == b.tokenizer().special_ids()
        && a.config().max_length == b.config().max_length
}
