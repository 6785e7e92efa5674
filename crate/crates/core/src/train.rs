//! Training loops for the baselines and for D-REX, with best-by-validation
//! checkpoint selection, plus the evaluation helpers they share.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueSpan, ModelInput, PairExample, RelationSchema, TokenSpan};
use crate::encoder::Params;
use crate::error::{DrexError, Result};
use crate::heads::{decode_explanation, joint_loss_tensor, relation_loss, span_loss, DecodeMode, Region};
use crate::metrics::{mean_trigger_scores, mrr, relation_f1, MetricValues, RankedPrediction, TriggerScore};
use crate::models::{JointModel, RelationModel, SpanModel};
use crate::system::{greedy_explanations, relation_explanation, DrexSystem, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub max_span_len: usize,
    pub alpha: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 0.01,
            batch_size: 30,
            epochs: 20,
            seed: 0,
            threshold: 0.5,
            max_span_len: 20,
            alpha: 0.5,
        }
    }
}

impl TrainOptions {
    fn optimizer(&self, params: &[&Params]) -> Result<AdamW> {
        let vars = params.iter().flat_map(|p| p.vars()).collect();
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
        )?)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DrexError::Config("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DrexError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation score used for model selection.
    pub validation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_validation: f64,
}

/// Epoch-seeded shuffled batches.
pub fn epoch_batches<T: Copy>(items: &[T], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<T>> {
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order.chunks(batch_size).map(<[T]>::to_vec).collect()
}

fn targets(pairs: &[&PairExample], dtype: DType) -> Result<Tensor> {
    let k = pairs[0].targets.len();
    let flat: Vec<f64> = pairs.iter().flat_map(|p| p.targets.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (pairs.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Runs `epochs` epochs of `step`, keeping the parameters of the epoch with
/// the highest validation score.
fn select_best<T: Copy>(
    params: &[&Params],
    items: &[T],
    opts: &TrainOptions,
    label: &str,
    mut step: impl FnMut(&[T], &mut AdamW) -> Result<f64>,
    mut validate: impl FnMut() -> Result<f64>,
) -> Result<TrainingLog> {
    opts.validate()?;
    if items.is_empty() {
        return Err(DrexError::Input(format!("no training examples for {label}")));
    }
    let mut optimizer = opts.optimizer(params)?;
    let mut log = TrainingLog {
        best_validation: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = None;
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(items, opts.batch_size, opts.seed, epoch);
        for batch in &batches {
            total += step(batch, &mut optimizer)?;
        }
        let validation = validate()?;
        log::info!(
            "{label} epoch {}: loss {:.4}, validation {:.4}",
            epoch + 1,
            total / batches.len() as f64,
            validation
        );
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: total / batches.len() as f64,
            validation,
        });
        if validation > log.best_validation {
            log.best_validation = validation;
            log.best_epoch = epoch + 1;
            best = Some(params.iter().map(|p| p.snapshot()).collect::<Result<Vec<_>>>()?);
        }
    }
    if let Some(snaps) = best {
        for (p, s) in params.iter().zip(&snaps) {
            p.restore(s)?;
        }
    }
    Ok(log)
}

pub fn ranker_predictions(model: &RelationModel, pairs: &[&PairExample], threshold: f64) -> Result<Vec<RankedPrediction>> {
    let inputs: Vec<&ModelInput> = pairs.iter().map(|p| &p.base).collect();
    crate::metrics::rater_predictions(model, pairs, &inputs, threshold)
}

pub fn relation_metrics(predictions: &[RankedPrediction]) -> Result<MetricValues> {
    let mut v = MetricValues::default().with_f1(&relation_f1(predictions)?);
    v.mrr = Some(mrr(predictions)?);
    Ok(v)
}

pub fn evaluate_ranker(model: &RelationModel, pairs: &[&PairExample], threshold: f64) -> Result<MetricValues> {
    relation_metrics(&ranker_predictions(model, pairs, threshold)?)
}

pub fn train_ranker(model: &RelationModel, train: &[&PairExample], dev: &[&PairExample], opts: &TrainOptions) -> Result<TrainingLog> {
    let dtype = model.params().dtype();
    select_best(
        &[model.params()],
        train,
        opts,
        "ranker",
        |batch, opt| {
            let inputs: Vec<&ModelInput> = batch.iter().map(|p| &p.base).collect();
            let loss = relation_loss(&model.forward(&inputs)?, &targets(batch, dtype)?)?.mean_all()?;
            opt.backward_step(&loss)?;
            scalar(&loss)
        },
        || Ok(evaluate_ranker(model, dev, opts.threshold)?.f1.unwrap_or(0.0)),
    )
}

/// (pair, relation, gold span) for every aligned trigger.
pub fn supervised_spans<'a>(pairs: &[&'a PairExample]) -> Vec<(&'a PairExample, usize, DialogueSpan)> {
    pairs
        .iter()
        .flat_map(|p| p.triggers.iter().filter_map(move |t| t.span.map(|s| (*p, t.class, s))))
        .collect()
}

fn regions(inputs: &[ModelInput]) -> Vec<Region> {
    inputs
        .iter()
        .map(|i| Region {
            prefix_len: i.prefix_len,
            dialogue_len: i.dialogue_len,
        })
        .collect()
}

/// Mean token F1 and exact match of greedy explanations against every
/// annotated gold trigger.
pub fn explainer_trigger_scores(
    model: &SpanModel,
    schema: &RelationSchema,
    pairs: &[&PairExample],
    max_span_len: usize,
) -> Result<Option<TriggerScore>> {
    let requests: Vec<(&PairExample, usize)> = pairs
        .iter()
        .flat_map(|p| p.triggers.iter().map(move |t| (*p, t.class)))
        .collect();
    let spans = greedy_explanations(model, schema, &requests, max_span_len)?;
    Ok(mean_trigger_scores(requests.iter().zip(&spans).map(|((p, c), s)| {
        let pred = s.and_then(|s| p.span_text(s));
        (pred, p.trigger_for(*c).map(|t| t.text.as_str()))
    })))
}

pub fn train_explainer(
    model: &SpanModel,
    schema: &RelationSchema,
    train: &[&PairExample],
    dev: &[&PairExample],
    opts: &TrainOptions,
) -> Result<TrainingLog> {
    let items = supervised_spans(train);
    let builder = model.input_builder();
    select_best(
        &[model.params()],
        &items,
        opts,
        "explainer",
        |batch, opt| {
            let inputs: Vec<ModelInput> = batch
                .iter()
                .map(|(p, c, _)| p.explainer_input(&builder, schema, *c))
                .collect::<Result<_>>()?;
            let gold: Vec<TokenSpan> = batch
                .iter()
                .zip(&inputs)
                .map(|((_, _, s), i)| {
                    i.to_absolute(*s)
                        .ok_or_else(|| DrexError::Input("trigger lies outside the explainer input".into()))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&ModelInput> = inputs.iter().collect();
            let loss = span_loss(&model.forward(&refs)?, &gold, &regions(&inputs))?.mean_all()?;
            opt.backward_step(&loss)?;
            scalar(&loss)
        },
        || {
            Ok(explainer_trigger_scores(model, schema, dev, opts.max_span_len)?
                .map_or(0.0, |s| s.token_f1))
        },
    )
}

/// Relation probabilities and one greedy span per pair from the joint model.
pub fn joint_predictions(model: &JointModel, pairs: &[&PairExample], opts: &TrainOptions) -> Result<Vec<PredictionRecord>> {
    let inputs: Vec<&ModelInput> = pairs.iter().map(|p| &p.base).collect();
    let outputs = model.predict(&inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    pairs
        .iter()
        .zip(outputs)
        .map(|(pair, (scores, dist))| {
            let span = decode_explanation(&dist, pair.base.prefix_len, opts.max_span_len, DecodeMode::Greedy, &mut rng)
                .span
                .map(|s| pair.base.to_dialogue(s))
                .transpose()?;
            let ranking = scores.ranking();
            let top = ranking[0];
            let mut record = PredictionRecord::new(
                pair,
                scores.probs.clone(),
                vec![top],
                vec![relation_explanation(pair, model.schema(), top, span)],
            );
            // the single span stands for every gold relation
            record.gold_explanations = pair
                .gold
                .iter()
                .map(|&c| relation_explanation(pair, model.schema(), c, span))
                .collect();
            Ok(record)
        })
        .collect()
}

pub fn train_joint(model: &JointModel, train: &[&PairExample], dev: &[&PairExample], opts: &TrainOptions) -> Result<TrainingLog> {
    let dtype = model.params().dtype();
    select_best(
        &[model.params()],
        train,
        opts,
        "joint",
        |batch, opt| {
            let inputs: Vec<&ModelInput> = batch.iter().map(|p| &p.base).collect();
            let out = model.forward(&inputs)?;
            let l_re = relation_loss(&out.probs, &targets(batch, dtype)?)?;
            // one span per input: the first aligned trigger of the pair
            let gold: Vec<Option<TokenSpan>> = batch
                .iter()
                .map(|p| p.triggers.iter().find_map(|t| t.span).and_then(|s| p.base.to_absolute(s)))
                .collect();
            // rows without a trigger get a placeholder span and zero weight
            let placeholder: Vec<TokenSpan> = batch
                .iter()
                .zip(&gold)
                .map(|(p, g)| g.unwrap_or(TokenSpan::new(p.base.prefix_len, p.base.prefix_len)))
                .collect();
            let weights: Vec<f64> = gold.iter().map(|g| if g.is_some() { 1.0 } else { 0.0 }).collect();
            let weights = Tensor::from_vec(weights, batch.len(), &Device::Cpu)?.to_dtype(dtype)?;
            let reg: Vec<Region> = batch
                .iter()
                .map(|p| Region {
                    prefix_len: p.base.prefix_len,
                    dialogue_len: p.base.dialogue_len,
                })
                .collect();
            let l_ex = (span_loss(&out.spans, &placeholder, &reg)? * weights)?;
            let loss = joint_loss_tensor(&l_re, &l_ex, opts.alpha)?.mean_all()?;
            opt.backward_step(&loss)?;
            scalar(&loss)
        },
        || {
            let records = joint_predictions(model, dev, opts)?;
            Ok(crate::metrics::evaluate_records(&records, opts.threshold)?.f1.unwrap_or(0.0))
        },
    )
}

pub fn drex_predictions(system: &DrexSystem, pairs: &[&PairExample]) -> Result<Vec<RankedPrediction>> {
    Ok(system
        .infer(pairs)?
        .iter()
        .zip(pairs)
        .map(|(p, pair)| RankedPrediction::from_probs(pair.id.clone(), &p.probs, system.config.threshold, &pair.gold))
        .collect())
}

pub fn evaluate_drex(system: &DrexSystem, pairs: &[&PairExample]) -> Result<MetricValues> {
    relation_metrics(&drex_predictions(system, pairs)?)
}

/// Prediction dump with top-k explanations and explanations for each gold
/// relation.
pub fn drex_records(system: &DrexSystem, pairs: &[&PairExample]) -> Result<Vec<PredictionRecord>> {
    let predictions = system.infer(pairs)?;
    let requests: Vec<(&PairExample, usize)> = pairs.iter().flat_map(|p| p.gold.iter().map(move |&c| (*p, c))).collect();
    let gold_spans = greedy_explanations(&system.explainer, system.schema(), &requests, system.config.max_span_len)?;
    let mut cursor = 0;
    Ok(pairs
        .iter()
        .zip(predictions)
        .map(|(pair, p)| {
            let mut record = PredictionRecord::new(pair, p.probs, p.top_k, p.explanations);
            record.gold_explanations = pair
                .gold
                .iter()
                .zip(&gold_spans[cursor..cursor + pair.gold.len()])
                .map(|(&c, &s)| relation_explanation(pair, system.schema(), c, s))
                .collect();
            cursor += pair.gold.len();
            record
        })
        .collect())
}

/// D-REX epochs over EX and RR; keeps the epoch with the best validation F1.
pub fn train_drex(system: &DrexSystem, train: &[&PairExample], dev: &[&PairExample], epochs: usize, seed: u64) -> Result<TrainingLog> {
    let opts = TrainOptions {
        learning_rate: system.config.learning_rate,
        weight_decay: system.config.weight_decay,
        batch_size: system.config.batch_size,
        epochs,
        seed,
        threshold: system.config.threshold,
        max_span_len: system.config.max_span_len,
        alpha: system.config.alpha,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    select_best(
        &[system.explainer.params(), system.reranker.params()],
        train,
        &opts,
        "drex",
        |batch, optimizer| Ok(system.train_step(batch, optimizer, &mut rng)?.total_loss),
        || Ok(evaluate_drex(system, dev)?.f1.unwrap_or(0.0)),
    )
}
