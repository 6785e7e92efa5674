//! Shared fixtures and plain-loop reference implementations for the
//! integration tests.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use drex::corpus::{prepare_split, DialogueSpan, InputBuilder, ModelInput, PairExample, PreparedSplit, TokenSpan};
use drex::encoder::{EncoderConfig, Params, Precision};
use drex::heads::{relation_loss, span_loss, Region};
use drex::train::{train_ranker, TrainOptions};
use drex::system::{policy_gradient_loss, DrexConfig, DrexSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use drex::models::{RelationModel, SpanModel};
use drex::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use drex::tokenizer::{AnyTokenizer, SpecialTokens, WordTokenizer};

pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub tokenizer: WordTokenizer,
    pub config: EncoderConfig,
    pub train: PreparedSplit,
    pub dev: PreparedSplit,
    pub test: PreparedSplit,
}

impl Fixture {
    pub fn tokenizer(&self) -> AnyTokenizer {
        AnyTokenizer::Word(self.tokenizer.clone())
    }

    pub fn ranker(&self, seed: u64) -> RelationModel {
        RelationModel::new(self.config.clone(), self.tokenizer(), self.corpus.schema.clone(), seed).unwrap()
    }

    pub fn explainer(&self, seed: u64) -> SpanModel {
        SpanModel::new(self.config.clone(), self.tokenizer(), seed).unwrap()
    }
}

/// Short dialogues and a small encoder, for fast tests.
pub fn small_fixture(precision: Precision, pairs: usize, seed: u64) -> Fixture {
    let cfg = SyntheticConfig {
        seed,
        train_pairs: pairs,
        dev_pairs: (pairs / 4).max(1),
        test_pairs: (pairs / 4).max(1),
        min_turns: 2,
        max_turns: 4,
        min_words: 2,
        max_words: 4,
        ..Default::default()
    };
    fixture(&cfg, precision, 16, 1, 64)
}

pub fn fixture(cfg: &SyntheticConfig, precision: Precision, hidden: usize, layers: usize, max_length: usize) -> Fixture {
    let corpus = generate(cfg).unwrap();
    let texts = corpus.texts();
    let tokenizer = WordTokenizer::build(texts.iter().map(String::as_str), SpecialTokens::bert(), true).unwrap();
    let mut config = EncoderConfig::tiny(tokenizer.vocab().len(), max_length);
    config.hidden_size = hidden;
    config.num_layers = layers;
    config.num_heads = 2;
    config.intermediate_size = 2 * hidden;
    config.precision = precision;
    let builder = InputBuilder::new(AnyTokenizer::Word(tokenizer.clone()).into_shared(), max_length);
    let prep = |s| prepare_split(s, &builder, &corpus.schema).unwrap();
    let (train, dev, test) = (prep(&corpus.train), prep(&corpus.dev), prep(&corpus.test));
    Fixture {
        corpus,
        tokenizer,
        config,
        train,
        dev,
        test,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// P_i = sigmoid(Σ_h c_h W_ih).
pub fn classify_oracle(pooled: &[f64], weight: &[Vec<f64>]) -> Vec<f64> {
    weight
        .iter()
        .map(|row| sigmoid(row.iter().zip(pooled).map(|(w, c)| w * c).sum()))
        .collect()
}

pub fn relation_loss_oracle(probs: &[f64], labels: &[f64]) -> f64 {
    let k = probs.len() as f64;
    let mut s = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        s += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    -s / k
}

pub fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    logits.iter().map(|x| (x - m).exp() / z).collect()
}

/// Literal span loss over dialogue positions `prefix..prefix+d`.
pub fn span_loss_oracle(start_probs: &[f64], end_probs: &[f64], prefix: usize, d: usize, gold: (usize, usize)) -> f64 {
    let mut s = 0.0;
    for i in prefix..prefix + d {
        let ys = if i == gold.0 { 1.0 } else { 0.0 };
        let ye = if i == gold.1 { 1.0 } else { 0.0 };
        s += ys * start_probs[i].ln() + (1.0 - ys) * (1.0 - start_probs[i]).ln();
        s += ye * end_probs[i].ln() + (1.0 - ye) * (1.0 - end_probs[i]).ln();
    }
    -s / d as f64
}

/// Σ over pairs of Σ over gold of 1/rank, divided by the number of pairs.
pub fn mrr_oracle(rankings: &[Vec<usize>], golds: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (ranking, gold) in rankings.iter().zip(golds) {
        for g in gold {
            for (pos, r) in ranking.iter().enumerate() {
                if r == g {
                    total += 1.0 / (pos as f64 + 1.0);
                }
            }
        }
    }
    total / rankings.len() as f64
}

pub fn micro_f1_oracle(preds: &[Vec<usize>], golds: &[Vec<usize>], k: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        for r in 0..k {
            match (p.contains(&r), g.contains(&r)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    2.0 * p * r / (p + r)
}

/// Largest relative error between autograd and five-point finite differences,
/// over the `per_var` largest-gradient entries of every named parameter.
pub fn max_gradient_error(params: &Params, names: &[String], per_var: usize, loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for name in names {
        let var = params.get(name).unwrap();
        let original = var.as_tensor().copy().unwrap();
        let shape = original.shape().clone();
        let values = original.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; values.len()],
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        for &i in order.iter().take(per_var) {
            let eval = |delta: f64| {
                let mut v = values.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            var.set(&original).unwrap();
            let scale = analytic[i].abs().max(numeric.abs());
            let err = if scale < 1e-6 { (analytic[i] - numeric).abs() } else { (analytic[i] - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient checks of the relation, span and policy-gradient losses on an f64
/// tiny encoder: (loss name, worst relative error).
pub fn gradient_checks(per_var: usize) -> Vec<(&'static str, f64)> {
    let fx = small_fixture(Precision::F64, 8, 21);
    let pairs: Vec<&PairExample> = fx.train.pairs.iter().take(3).collect();
    let inputs: Vec<&ModelInput> = pairs.iter().map(|p| &p.base).collect();
    let k = fx.corpus.schema.len();
    let mut out = Vec::new();

    let ranker = fx.ranker(3);
    let targets: Vec<f64> = pairs.iter().flat_map(|p| p.targets.clone()).collect();
    let targets = Tensor::from_vec(targets, (pairs.len(), k), &Device::Cpu).unwrap();
    let names = checked_names(ranker.params());
    let err = max_gradient_error(ranker.params(), &names, per_var, || {
        relation_loss(&ranker.forward(&inputs).unwrap(), &targets).unwrap().mean_all().unwrap()
    });
    out.push(("relation loss", err));

    let explainer = fx.explainer(4);
    let gold: Vec<TokenSpan> = inputs
        .iter()
        .map(|x| TokenSpan::new(x.prefix_len + 1, x.prefix_len + 2.min(x.dialogue_len - 1)))
        .collect();
    let regions: Vec<Region> = inputs
        .iter()
        .map(|x| Region { prefix_len: x.prefix_len, dialogue_len: x.dialogue_len })
        .collect();
    let names = checked_names(explainer.params());
    let err = max_gradient_error(explainer.params(), &names, per_var, || {
        span_loss(&explainer.forward(&inputs).unwrap(), &gold, &regions).unwrap().mean_all().unwrap()
    });
    out.push(("span loss", err));

    let rewards = [0.7, -0.3, 1.1];
    let err = max_gradient_error(explainer.params(), &names, per_var, || {
        let (s, e) = explainer.forward(&inputs).unwrap().span_log_probs(&gold).unwrap();
        policy_gradient_loss(&s, &e, &rewards).unwrap().sum_all().unwrap()
    });
    out.push(("policy-gradient loss", err));
    out
}

fn checked_names(params: &Params) -> Vec<String> {
    params
        .names()
        .into_iter()
        .filter(|n| !n.contains("position_embeddings"))
        .collect()
}

pub fn drex_system(fx: &Fixture, seed: u64, config: DrexConfig) -> DrexSystem {
    DrexSystem::from_baselines(fx.ranker(seed), fx.explainer(seed + 1), config).unwrap()
}

pub fn small_drex_config() -> DrexConfig {
    DrexConfig {
        top_k: 3,
        learning_rate: 1e-3,
        max_span_len: 4,
        ..Default::default()
    }
}

/// Runs `steps` D-REX updates and checks that R never changes and that every
/// sampled explanation lies inside the dialogue of its explainer input.
pub fn structural_run(steps: usize, seed: u64) -> Result<(), String> {
    let fx = small_fixture(Precision::F32, 12, seed);
    let system = drex_system(&fx, seed, small_drex_config());
    let probe: Vec<&ModelInput> = fx.dev.pairs.iter().map(|p| &p.base).collect();
    let checksum = system.ranker.params().checksum().unwrap();
    let before = system.ranker.predict(&probe).unwrap();
    let rr_before = system.reranker.params().checksum().unwrap();
    let ex_before = system.explainer.params().checksum().unwrap();
    let mut optimizer = system.optimizer().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = fx.train.refs();
    let builder = system.input_builder().clone();
    for step in 0..steps {
        let batch: Vec<&PairExample> = (0..4).map(|i| pairs[(step * 4 + i) % pairs.len()]).collect();
        let report = system.train_step(&batch, &mut optimizer, &mut rng).unwrap();
        if report.policy_losses.len() != batch.len() * 3 || report.rerank_losses.len() != batch.len() * 3 {
            return Err(format!("step {step}: expected {} explanations", batch.len() * 3));
        }
        for ex in &report.explanations {
            if let Some(span) = ex.span {
                let input = batch[ex.pair].explainer_input(&builder, system.schema(), ex.class).unwrap();
                if input.to_absolute(span).is_none() || span.end - span.start >= 4 {
                    return Err(format!("step {step}: span {span:?} outside the dialogue or too long"));
                }
            }
        }
        if system.ranker.params().checksum().unwrap() != checksum {
            return Err(format!("ranker weights changed at step {step}"));
        }
    }
    if system.ranker.predict(&probe).unwrap() != before {
        return Err("ranker outputs changed".into());
    }
    if system.reranker.params().checksum().unwrap() == rr_before || system.explainer.params().checksum().unwrap() == ex_before {
        return Err("explainer or reranker was not updated".into());
    }
    Ok(())
}

/// LOO from first principles: mask by hand, score each input on its own,
/// and take the ratio of micro F1s.
pub fn loo_oracle(
    rater: &RelationModel,
    pairs: &[&PairExample],
    spans: &[Vec<DialogueSpan>],
    threshold: f64,
    mask_id: u32,
) -> f64 {
    let k = rater.schema().len();
    let decide = |input: &ModelInput| -> Vec<usize> {
        let probs = &rater.predict(&[input]).unwrap()[0].probs;
        (0..k).filter(|&i| probs[i] >= threshold).collect()
    };
    let golds: Vec<Vec<usize>> = pairs.iter().map(|p| p.gold.clone()).collect();
    let clean: Vec<Vec<usize>> = pairs.iter().map(|p| decide(&p.base)).collect();
    let masked: Vec<Vec<usize>> = pairs
        .iter()
        .zip(spans)
        .map(|(p, own)| {
            let mut input = p.base.clone();
            for s in own {
                for i in s.start..=s.end {
                    input.token_ids[p.base.prefix_len + i] = mask_id;
                }
            }
            decide(&input)
        })
        .collect();
    micro_f1_oracle(&masked, &golds, k) / micro_f1_oracle(&clean, &golds, k)
}

/// Random probability vectors with random gold subsets (possibly empty).
pub fn random_ranking_fixture(seed: u64, pairs: usize, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = (0..pairs).map(|_| (0..k).map(|_| rng.gen::<f64>()).collect()).collect();
    let golds = (0..pairs)
        .map(|_| (0..k).filter(|_| rng.gen_bool(0.2)).collect())
        .collect();
    (probs, golds)
}

/// Ranking by descending probability with index tie-break, by selection.
pub fn ranking_oracle(probs: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..probs.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if probs[left[j]] > probs[left[best]] {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// A ranker briefly fitted to the fixture, so that its decisions depend on the
/// dialogue and react to masking.
pub fn fitted_rater(fx: &Fixture, seed: u64, epochs: usize) -> RelationModel {
    let rater = fx.ranker(seed);
    let opts = TrainOptions {
        learning_rate: 1e-2,
        batch_size: 8,
        epochs,
        seed,
        ..Default::default()
    };
    train_ranker(&rater, &fx.train.refs(), &fx.dev.refs(), &opts).unwrap();
    rater
}
