//! The D-REX system: frozen ranker R, explanation policy EX, re-ranker RR.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueSpan, InputBuilder, ModelInput, PairExample, RelationSchema, TokenSpan};
use crate::error::{DrexError, Result};
use crate::heads::{decode_explanation, relation_loss, span_loss, DecodeMode, Region, SpanDistribution};
use crate::models::{compatible, RelationModel, SpanModel};
use crate::tokenizer::Tokenizer;

const CONFIG_FILE: &str = "drex_config.json";

/// Which model scores the masked and unmasked dialogue for the LOO reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooReference {
    Ranker,
    Reranker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrexConfig {
    pub top_k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs_baseline: usize,
    pub max_epochs_drex: usize,
    pub alpha: f64,
    pub loo_reference: LooReference,
    pub weight_decay: f64,
    /// Longest explanation, in tokens.
    pub max_span_len: usize,
    /// Probability at or above which a relation is predicted.
    pub threshold: f64,
    /// Clip each reward to `[-c, c]`; off by default.
    pub reward_clip: Option<f64>,
    pub use_rerank_reward: bool,
    pub use_loo_reward: bool,
}

impl Default for DrexConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            learning_rate: 3e-5,
            batch_size: 30,
            max_epochs_baseline: 20,
            max_epochs_drex: 30,
            alpha: 0.5,
            loo_reference: LooReference::Ranker,
            weight_decay: 0.01,
            max_span_len: 20,
            threshold: 0.5,
            reward_clip: None,
            use_rerank_reward: true,
            use_loo_reward: true,
        }
    }
}

impl DrexConfig {
    pub fn validate(&self, num_relations: usize) -> Result<()> {
        let fail = |m: String| Err(DrexError::Config(m));
        if self.top_k == 0 || self.top_k > num_relations {
            return fail(format!("top_k {} must lie in 1..={num_relations}", self.top_k));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.max_span_len == 0 {
            return fail("max_span_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if let Some(c) = self.reward_clip {
            if !(c > 0.0) {
                return fail(format!("reward clip {c} must be positive"));
            }
        }
        if self.weight_decay < 0.0 {
            return fail("weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn optimizer_params(&self) -> ParamsAdamW {
        ParamsAdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Rewards for one explanation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBundle {
    pub rerank_reward: f64,
    pub loo_reward: f64,
}

impl RewardBundle {
    pub fn total(&self) -> f64 {
        self.rerank_reward + self.loo_reward
    }
}

/// Loss improvement of RR over R on the same gold labels.
pub fn rerank_reward(loss_ranker: f64, loss_reranker: f64) -> f64 {
    loss_ranker - loss_reranker
}

/// Loss increase caused by masking the explanation.
pub fn loo_reward_from_losses(masked_loss: f64, clean_loss: f64) -> f64 {
    masked_loss - clean_loss
}

/// `-(log P^S_i + log P^E_j) * (R_RR + R_LOO)` per row. Rewards enter as
/// constants.
pub fn policy_gradient_loss(log_p_start: &Tensor, log_p_end: &Tensor, total_rewards: &[f64]) -> Result<Tensor> {
    let n = log_p_start.dims1()?;
    if log_p_end.dims1()? != n || total_rewards.len() != n {
        return Err(DrexError::Shape(format!(
            "{n} start, {} end log-probs and {} rewards",
            log_p_end.dims1()?,
            total_rewards.len()
        )));
    }
    let rewards = Tensor::from_vec(total_rewards.to_vec(), n, &Device::Cpu)?.to_dtype(log_p_start.dtype())?;
    Ok(((log_p_start + log_p_end)?.neg()? * rewards)?)
}

pub fn policy_gradient_loss_value(log_p_start: f64, log_p_end: f64, rewards: &RewardBundle) -> f64 {
    -(log_p_start + log_p_end) * rewards.total()
}

/// Plain mean of R's probabilities and each RR prediction, accumulated as
/// offsets from R so that identical predictions return R bit for bit.
pub fn ensemble_mean(ranker: &[f64], reranker: &[Vec<f64>]) -> Vec<f64> {
    let n = (reranker.len() + 1) as f64;
    ranker
        .iter()
        .enumerate()
        .map(|(i, &r)| r + reranker.iter().map(|row| row[i] - r).sum::<f64>() / n)
        .collect()
}

fn targets_tensor(rows: &[&[f64]], dtype: DType) -> Result<Tensor> {
    let k = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

fn to_f64s(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Detached relation losses of `model` on `inputs` against per-row targets.
pub fn relation_losses(model: &RelationModel, inputs: &[&ModelInput], targets: &[&[f64]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (chunk, t) in inputs.chunks(64).zip(targets.chunks(64)) {
        let probs = model.forward(chunk)?.detach();
        out.extend(to_f64s(&relation_loss(&probs, &targets_tensor(t, probs.dtype())?)?)?);
    }
    Ok(out)
}

/// One sampled explanation of a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepExplanation {
    pub pair: usize,
    pub class: usize,
    pub span: Option<DialogueSpan>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// R's loss per pair.
    pub ranker_losses: Vec<f64>,
    /// RR's loss per explanation.
    pub rerank_losses: Vec<f64>,
    pub rewards: Vec<RewardBundle>,
    pub policy_losses: Vec<f64>,
    pub supervised_losses: Vec<f64>,
    pub skipped_triggers: usize,
    pub explanations: Vec<StepExplanation>,
    /// Value that was backpropagated.
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationExplanation {
    pub class: usize,
    pub label: String,
    pub span: Option<DialogueSpan>,
    pub text: Option<String>,
    /// Byte range in the rendered dialogue.
    pub byte_range: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrexPrediction {
    pub pair_id: String,
    pub ranker_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub top_k: Vec<usize>,
    pub explanations: Vec<RelationExplanation>,
}

/// Greedy explanations of `explainer` for (pair, relation) requests.
pub fn greedy_explanations(
    explainer: &SpanModel,
    schema: &RelationSchema,
    requests: &[(&PairExample, usize)],
    max_span_len: usize,
) -> Result<Vec<Option<DialogueSpan>>> {
    let builder = explainer.input_builder();
    let inputs: Vec<ModelInput> = requests
        .iter()
        .map(|(p, c)| p.explainer_input(&builder, schema, *c))
        .collect::<Result<_>>()?;
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let dists = explainer.predict(&refs)?;
    decode_all(&inputs, &dists, max_span_len, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0))
}

fn decode_all<R: Rng>(
    inputs: &[ModelInput],
    dists: &[SpanDistribution],
    max_span_len: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<Option<DialogueSpan>>> {
    inputs
        .iter()
        .zip(dists)
        .map(|(input, d)| {
            decode_explanation(d, input.prefix_len, max_span_len, mode, rng)
                .span
                .map(|s| input.to_dialogue(s))
                .transpose()
        })
        .collect()
}

#[derive(Debug)]
pub struct DrexSystem {
    pub ranker: RelationModel,
    pub explainer: SpanModel,
    pub reranker: RelationModel,
    pub config: DrexConfig,
    builder: InputBuilder,
    mask_id: u32,
}

impl DrexSystem {
    pub fn new(ranker: RelationModel, explainer: SpanModel, reranker: RelationModel, config: DrexConfig) -> Result<Self> {
        if ranker.schema() != reranker.schema() {
            return Err(DrexError::Config("ranker and reranker use different relation schemas".into()));
        }
        if !compatible(ranker.encoder(), explainer.encoder()) || !compatible(ranker.encoder(), reranker.encoder()) {
            return Err(DrexError::Config(
                "ranker, explainer and reranker must share a tokenizer and maximum length".into(),
            ));
        }
        config.validate(ranker.schema().len())?;
        let builder = ranker.input_builder();
        let mask_id = ranker.encoder().tokenizer().special_ids().mask;
        Ok(Self {
            ranker,
            explainer,
            reranker,
            config,
            builder,
            mask_id,
        })
    }

    /// RR starts as a copy of the ranker.
    pub fn from_baselines(ranker: RelationModel, explainer: SpanModel, config: DrexConfig) -> Result<Self> {
        let reranker = ranker.duplicate()?;
        Self::new(ranker, explainer, reranker, config)
    }

    pub fn schema(&self) -> &RelationSchema {
        self.ranker.schema()
    }

    pub fn input_builder(&self) -> &InputBuilder {
        &self.builder
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    /// AdamW over EX and RR parameters only.
    pub fn optimizer(&self) -> Result<AdamW> {
        let mut vars = self.explainer.params().vars();
        vars.extend(self.reranker.params().vars());
        Ok(AdamW::new(vars, self.config.optimizer_params())?)
    }

    fn loo_model(&self) -> &RelationModel {
        match self.config.loo_reference {
            LooReference::Ranker => &self.ranker,
            LooReference::Reranker => &self.reranker,
        }
    }

    /// `L(s, o, d_mask(ex)) - L(s, o, d)` under the configured reference model.
    pub fn loo_reward(&self, pair: &PairExample, explanation: Option<DialogueSpan>) -> Result<f64> {
        let Some(span) = explanation else {
            return Ok(0.0);
        };
        let masked = pair.masked_base(&[span], self.mask_id)?;
        let targets = pair.targets.as_slice();
        let losses = relation_losses(self.loo_model(), &[&masked, &pair.base], &[targets, targets])?;
        Ok(loo_reward_from_losses(losses[0], losses[1]))
    }

    fn clip(&self, r: f64) -> f64 {
        match self.config.reward_clip {
            Some(c) => r.clamp(-c, c),
            None => r,
        }
    }

    /// One optimizer step over a batch of pairs.
    pub fn train_step<R: Rng>(&self, batch: &[&PairExample], optimizer: &mut AdamW, rng: &mut R) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(DrexError::Input("empty training batch".into()));
        }
        let schema = self.schema();
        let k = self.config.top_k;
        let dtype = self.ranker.params().dtype();

        // R: probabilities and loss, never updated
        let bases: Vec<&ModelInput> = batch.iter().map(|p| &p.base).collect();
        let targets: Vec<&[f64]> = batch.iter().map(|p| p.targets.as_slice()).collect();
        let ranker_probs = self.ranker.forward(&bases)?.detach();
        let ranker_losses = to_f64s(&relation_loss(&ranker_probs, &targets_tensor(&targets, dtype)?)?)?;
        let rankings = crate::heads::RelationScores::from_tensor(&ranker_probs)?;

        // EX: sample one explanation for each of R's top-k relations
        let mut owners = Vec::with_capacity(batch.len() * k);
        let mut ex_inputs = Vec::with_capacity(batch.len() * k);
        for (pi, (pair, scores)) in batch.iter().zip(&rankings).enumerate() {
            for class in scores.top_k(k) {
                owners.push((pi, class));
                ex_inputs.push(pair.explainer_input(&self.builder, schema, class)?);
            }
        }
        let ex_refs: Vec<&ModelInput> = ex_inputs.iter().collect();
        let spans = self.explainer.forward(&ex_refs)?;
        let dists = spans.distributions()?;
        let sampled = decode_all(&ex_inputs, &dists, self.config.max_span_len, DecodeMode::Sample, rng)?;
        let chosen: Vec<TokenSpan> = sampled
            .iter()
            .zip(&ex_inputs)
            .map(|(s, input)| s.and_then(|s| input.to_absolute(s)).unwrap_or(TokenSpan::new(0, 0)))
            .collect();
        let (log_start, log_end) = spans.span_log_probs(&chosen)?;

        // RR conditioned on each explanation, against the gold labels
        let rr_inputs: Vec<ModelInput> = owners
            .iter()
            .zip(&sampled)
            .map(|(&(pi, _), span)| {
                let text = span.and_then(|s| batch[pi].span_text(s));
                batch[pi].reranker_input(&self.builder, text)
            })
            .collect::<Result<_>>()?;
        let rr_refs: Vec<&ModelInput> = rr_inputs.iter().collect();
        let rr_targets: Vec<&[f64]> = owners.iter().map(|&(pi, _)| targets[pi]).collect();
        let rr_loss = relation_loss(&self.reranker.forward(&rr_refs)?, &targets_tensor(&rr_targets, dtype)?)?;
        let rerank_losses = to_f64s(&rr_loss)?;

        // LOO under the reference model
        let masked: Vec<Option<ModelInput>> = owners
            .iter()
            .zip(&sampled)
            .map(|(&(pi, _), span)| span.map(|s| batch[pi].masked_base(&[s], self.mask_id)).transpose())
            .collect::<Result<_>>()?;
        let masked_rows: Vec<usize> = (0..masked.len()).filter(|&i| masked[i].is_some()).collect();
        let masked_refs: Vec<&ModelInput> = masked_rows.iter().map(|&i| masked[i].as_ref().unwrap()).collect();
        let masked_targets: Vec<&[f64]> = masked_rows.iter().map(|&i| rr_targets[i]).collect();
        let masked_losses = relation_losses(self.loo_model(), &masked_refs, &masked_targets)?;
        let clean_losses = match self.config.loo_reference {
            LooReference::Ranker => ranker_losses.clone(),
            LooReference::Reranker => relation_losses(&self.reranker, &bases, &targets)?,
        };
        let mut loo = vec![0.0; owners.len()];
        for (&row, masked_loss) in masked_rows.iter().zip(masked_losses) {
            loo[row] = loo_reward_from_losses(masked_loss, clean_losses[owners[row].0]);
        }

        let rewards: Vec<RewardBundle> = owners
            .iter()
            .enumerate()
            .map(|(row, &(pi, _))| {
                if sampled[row].is_none() {
                    return RewardBundle::default();
                }
                RewardBundle {
                    rerank_reward: if self.config.use_rerank_reward {
                        self.clip(rerank_reward(ranker_losses[pi], rerank_losses[row]))
                    } else {
                        0.0
                    },
                    loo_reward: if self.config.use_loo_reward { self.clip(loo[row]) } else { 0.0 },
                }
            })
            .collect();
        let totals: Vec<f64> = rewards.iter().map(RewardBundle::total).collect();
        let pg = policy_gradient_loss(&log_start, &log_end, &totals)?;
        let policy_losses = to_f64s(&pg)?;

        // supervised span loss for gold relations with an aligned trigger
        let mut skipped_triggers = 0;
        let mut sup_inputs = Vec::new();
        let mut sup_gold = Vec::new();
        for pair in batch {
            for trigger in &pair.triggers {
                let input = pair.explainer_input(&self.builder, schema, trigger.class)?;
                match trigger.span.and_then(|s| input.to_absolute(s)) {
                    Some(gold) => {
                        sup_gold.push(gold);
                        sup_inputs.push(input);
                    }
                    None => skipped_triggers += 1,
                }
            }
        }
        let mut total = (rr_loss.sum_all()? + pg.sum_all()?)?;
        let mut supervised_losses = Vec::new();
        if !sup_inputs.is_empty() {
            let refs: Vec<&ModelInput> = sup_inputs.iter().collect();
            let regions: Vec<Region> = sup_inputs
                .iter()
                .map(|i| Region {
                    prefix_len: i.prefix_len,
                    dialogue_len: i.dialogue_len,
                })
                .collect();
            let sup = span_loss(&self.explainer.forward(&refs)?, &sup_gold, &regions)?;
            supervised_losses = to_f64s(&sup)?;
            total = (total + sup.sum_all()?)?;
        }
        let total = (total / batch.len() as f64)?;
        optimizer.backward_step(&total)?;

        Ok(StepReport {
            ranker_losses,
            rerank_losses,
            rewards,
            policy_losses,
            supervised_losses,
            skipped_triggers,
            explanations: owners
                .iter()
                .zip(&sampled)
                .map(|(&(pair, class), &span)| StepExplanation { pair, class, span })
                .collect(),
            total_loss: total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        })
    }

    /// Greedy explanations for R's top-k and the k+1 mean of R and RR.
    pub fn infer(&self, pairs: &[&PairExample]) -> Result<Vec<DrexPrediction>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(16) {
            out.extend(self.infer_chunk(chunk)?);
        }
        Ok(out)
    }

    fn infer_chunk(&self, pairs: &[&PairExample]) -> Result<Vec<DrexPrediction>> {
        let schema = self.schema();
        let k = self.config.top_k;
        let bases: Vec<&ModelInput> = pairs.iter().map(|p| &p.base).collect();
        let ranker_scores = self.ranker.predict(&bases)?;
        let requests: Vec<(&PairExample, usize)> = pairs
            .iter()
            .zip(&ranker_scores)
            .flat_map(|(p, s)| s.top_k(k).into_iter().map(move |c| (*p, c)))
            .collect();
        let spans = greedy_explanations(&self.explainer, schema, &requests, self.config.max_span_len)?;
        let rr_inputs: Vec<ModelInput> = requests
            .iter()
            .zip(&spans)
            .map(|((p, _), s)| p.reranker_input(&self.builder, s.and_then(|s| p.span_text(s))))
            .collect::<Result<_>>()?;
        let rr_refs: Vec<&ModelInput> = rr_inputs.iter().collect();
        let rr_scores = self.reranker.predict(&rr_refs)?;

        let mut out = Vec::with_capacity(pairs.len());
        for (i, (pair, scores)) in pairs.iter().zip(&ranker_scores).enumerate() {
            let rows = i * k..(i + 1) * k;
            let rr: Vec<Vec<f64>> = rr_scores[rows.clone()].iter().map(|s| s.probs.clone()).collect();
            let explanations = requests[rows.clone()]
                .iter()
                .zip(&spans[rows])
                .map(|(&(_, class), &span)| relation_explanation(pair, schema, class, span))
                .collect();
            out.push(DrexPrediction {
                pair_id: pair.id.clone(),
                ranker_probs: scores.probs.clone(),
                probs: ensemble_mean(&scores.probs, &rr),
                top_k: scores.top_k(k),
                explanations,
            });
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.ranker.save(dir.join("ranker"))?;
        self.explainer.save(dir.join("explainer"))?;
        self.reranker.save(dir.join("reranker"))?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: DrexConfig = serde_json::from_slice(&std::fs::read(dir.join(CONFIG_FILE))?)?;
        Self::new(
            RelationModel::load(dir.join("ranker"))?,
            SpanModel::load(dir.join("explainer"))?,
            RelationModel::load(dir.join("reranker"))?,
            config,
        )
    }
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair_id: String,
    pub dialogue_id: String,
    pub subject: String,
    pub object: String,
    /// Rendered dialogue the byte ranges refer to.
    #[serde(default)]
    pub dialogue_text: String,
    /// Final relation probabilities.
    pub probs: Vec<f64>,
    pub gold: Vec<usize>,
    pub top_k: Vec<usize>,
    /// Explanations for the top-k relations.
    pub explanations: Vec<RelationExplanation>,
    /// Explanations produced for each gold relation, used for trigger scores.
    #[serde(default)]
    pub gold_explanations: Vec<RelationExplanation>,
    /// `(class, trigger text)` of annotated gold triggers.
    #[serde(default)]
    pub gold_triggers: Vec<(usize, String)>,
}

pub fn relation_explanation(pair: &PairExample, schema: &RelationSchema, class: usize, span: Option<DialogueSpan>) -> RelationExplanation {
    RelationExplanation {
        class,
        label: schema.labels()[class].clone(),
        span,
        text: span.and_then(|s| pair.span_text(s)).map(str::to_string),
        byte_range: span.and_then(|s| pair.base.char_range(s)).map(|r| (r.start, r.end)),
    }
}

impl PredictionRecord {
    pub fn new(pair: &PairExample, probs: Vec<f64>, top_k: Vec<usize>, explanations: Vec<RelationExplanation>) -> Self {
        Self {
            pair_id: pair.id.clone(),
            dialogue_id: pair.dialogue_id.clone(),
            subject: pair.subject.clone(),
            object: pair.object.clone(),
            dialogue_text: pair.dialogue.text.clone(),
            probs,
            gold: pair.gold.clone(),
            top_k,
            explanations,
            gold_explanations: Vec::new(),
            gold_triggers: pair.triggers.iter().map(|t| (t.class, t.text.clone())).collect(),
        }
    }
}

pub fn write_dump(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DrexError::Parse {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}
