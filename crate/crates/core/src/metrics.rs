//! Relation F1, all-gold MRR, trigger token F1 / exact match, the
//! leave-one-out explanation metric, and aggregation over seeds.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueSpan, ModelInput, PairExample, RelationSchema};
use crate::error::{DrexError, Result};
use crate::heads::{decode_explanation, DecodeMode, RelationScores};
use crate::models::{JointModel, RelationModel, SpanModel};
use crate::system::{greedy_explanations, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub pair_id: String,
    /// Every relation index, by descending probability.
    pub ranking: Vec<usize>,
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
}

impl RankedPrediction {
    pub fn from_probs(pair_id: impl Into<String>, probs: &[f64], threshold: f64, gold: &[usize]) -> Self {
        let scores = RelationScores { probs: probs.to_vec() };
        Self {
            pair_id: pair_id.into(),
            ranking: scores.ranking(),
            predicted: (0..probs.len()).filter(|&i| probs[i] >= threshold).collect(),
            gold: gold.to_vec(),
        }
    }

    pub fn is_complete_ranking(&self) -> bool {
        let n = self.ranking.len();
        let set: BTreeSet<usize> = self.ranking.iter().copied().collect();
        set.len() == n && self.ranking.iter().all(|&r| r < n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl F1Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

/// Micro F1 over (pair, relation) decisions. The no-relation outcome has no
/// class index, so it never counts as a prediction or a gold label.
pub fn relation_f1(predictions: &[RankedPrediction]) -> Result<F1Score> {
    if predictions.is_empty() {
        return Err(DrexError::Evaluation("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for p in predictions {
        let pred: BTreeSet<usize> = p.predicted.iter().copied().collect();
        let gold: BTreeSet<usize> = p.gold.iter().copied().collect();
        let hit = pred.intersection(&gold).count();
        tp += hit;
        fp += pred.len() - hit;
        fn_ += gold.len() - hit;
    }
    Ok(F1Score::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrrMode {
    /// Sum of reciprocal ranks of every gold relation, averaged over pairs.
    #[default]
    Literal,
    /// Each pair's sum divided by its number of gold relations.
    Normalized,
}

pub fn mrr(predictions: &[RankedPrediction]) -> Result<f64> {
    mrr_with(predictions, MrrMode::Literal)
}

pub fn mrr_with(predictions: &[RankedPrediction], mode: MrrMode) -> Result<f64> {
    if predictions.is_empty() {
        return Err(DrexError::Evaluation("no predictions to score".into()));
    }
    let mut total = 0.0;
    for p in predictions {
        let mut sum = 0.0;
        for g in &p.gold {
            let rank = p.ranking.iter().position(|r| r == g).ok_or_else(|| {
                DrexError::Evaluation(format!("gold relation {g} missing from the ranking of {}", p.pair_id))
            })?;
            sum += 1.0 / (rank + 1) as f64;
        }
        if mode == MrrMode::Normalized && !p.gold.is_empty() {
            sum /= p.gold.len() as f64;
        }
        total += sum;
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerScore {
    pub token_f1: f64,
    pub exact_match: f64,
}

/// Lowercase, drop punctuation, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2026}' | '\u{2013}' | '\u{2014}')
}

pub fn trigger_token_f1(predicted: Option<&str>, gold: Option<&str>) -> TriggerScore {
    let (pred, gold) = match (predicted, gold) {
        (None, None) => {
            return TriggerScore {
                token_f1: 1.0,
                exact_match: 1.0,
            }
        }
        (Some(p), Some(g)) => (normalize_answer(p), normalize_answer(g)),
        _ => {
            return TriggerScore {
                token_f1: 0.0,
                exact_match: 0.0,
            }
        }
    };
    let exact_match = if pred == gold { 1.0 } else { 0.0 };
    if pred.is_empty() || gold.is_empty() {
        return TriggerScore {
            token_f1: exact_match,
            exact_match,
        };
    }
    let mut remaining = gold.clone();
    let mut common = 0usize;
    for t in &pred {
        if let Some(i) = remaining.iter().position(|g| g == t) {
            remaining.swap_remove(i);
            common += 1;
        }
    }
    let token_f1 = if common == 0 {
        0.0
    } else {
        let p = common as f64 / pred.len() as f64;
        let r = common as f64 / gold.len() as f64;
        2.0 * p * r / (p + r)
    };
    TriggerScore { token_f1, exact_match }
}

/// Mean token F1 and exact match over (predicted, gold) pairs.
pub fn mean_trigger_scores<'a>(pairs: impl IntoIterator<Item = (Option<&'a str>, Option<&'a str>)>) -> Option<TriggerScore> {
    let mut n = 0usize;
    let (mut f1, mut em) = (0.0, 0.0);
    for (p, g) in pairs {
        let s = trigger_token_f1(p, g);
        f1 += s.token_f1;
        em += s.exact_match;
        n += 1;
    }
    (n > 0).then(|| TriggerScore {
        token_f1: f1 / n as f64,
        exact_match: em / n as f64,
    })
}

/// Produces one dialogue span (or none) for each (pair, relation) request.
pub trait Explainer {
    fn explain(&self, requests: &[(&PairExample, usize)]) -> Result<Vec<Option<DialogueSpan>>>;
}

/// Never explains.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullExplainer;

impl Explainer for NullExplainer {
    fn explain(&self, requests: &[(&PairExample, usize)]) -> Result<Vec<Option<DialogueSpan>>> {
        Ok(vec![None; requests.len()])
    }
}

/// Uniformly placed spans of a fixed width, reproducible from the seed.
#[derive(Debug, Clone, Copy)]
pub struct RandomSpanExplainer {
    pub seed: u64,
    pub width: usize,
}

impl Explainer for RandomSpanExplainer {
    fn explain(&self, requests: &[(&PairExample, usize)]) -> Result<Vec<Option<DialogueSpan>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(requests
            .iter()
            .map(|(pair, _)| {
                let n = pair.base.dialogue_len;
                if n == 0 || self.width == 0 {
                    return None;
                }
                let w = self.width.min(n);
                let start = rng.gen_range(0..=n - w);
                Some(DialogueSpan {
                    start,
                    end: start + w - 1,
                })
            })
            .collect())
    }
}

/// Greedy spans from a trained span model.
#[derive(Debug, Clone, Copy)]
pub struct ModelExplainer<'a> {
    pub model: &'a SpanModel,
    pub schema: &'a RelationSchema,
    pub max_span_len: usize,
}

impl Explainer for ModelExplainer<'_> {
    fn explain(&self, requests: &[(&PairExample, usize)]) -> Result<Vec<Option<DialogueSpan>>> {
        greedy_explanations(self.model, self.schema, requests, self.max_span_len)
    }
}

/// The joint model's single span per pair, whatever the relation.
#[derive(Debug, Clone, Copy)]
pub struct JointExplainer<'a> {
    pub model: &'a JointModel,
    pub max_span_len: usize,
}

impl Explainer for JointExplainer<'_> {
    fn explain(&self, requests: &[(&PairExample, usize)]) -> Result<Vec<Option<DialogueSpan>>> {
        let inputs: Vec<&ModelInput> = requests.iter().map(|(p, _)| &p.base).collect();
        let outputs = self.model.predict(&inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        requests
            .iter()
            .zip(outputs)
            .map(|((p, _), (_, dist))| {
                decode_explanation(&dist, p.base.prefix_len, self.max_span_len, DecodeMode::Greedy, &mut rng)
                    .span
                    .map(|s| p.base.to_dialogue(s))
                    .transpose()
            })
            .collect()
    }
}

/// Gold trigger spans where aligned.
#[derive(Debug, Clone, Copy, Default)]
pub struct TriggerExplainer;

impl Explainer for TriggerExplainer {
    fn explain(&self, requests: &[(&PairExample, usize)]) -> Result<Vec<Option<DialogueSpan>>> {
        Ok(requests.iter().map(|(p, c)| p.aligned_trigger(*c)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub clean_f1: f64,
    pub masked_f1: f64,
    pub loo: f64,
}

pub fn rater_predictions(rater: &RelationModel, pairs: &[&PairExample], inputs: &[&ModelInput], threshold: f64) -> Result<Vec<RankedPrediction>> {
    Ok(rater
        .predict(inputs)?
        .iter()
        .zip(pairs)
        .map(|(s, p)| RankedPrediction::from_probs(p.id.clone(), &s.probs, threshold, &p.gold))
        .collect())
}

/// `F1(D_mask) / F1(D)` for a fixed rater. Each pair's dialogue is masked
/// with the explanations of all its gold relations at once.
pub fn loo_metric(
    rater: &RelationModel,
    explainer: &dyn Explainer,
    pairs: &[&PairExample],
    threshold: f64,
) -> Result<LooResult> {
    let mask_id = crate::tokenizer::Tokenizer::special_ids(rater.encoder().tokenizer().as_ref()).mask;
    let requests: Vec<(&PairExample, usize)> = pairs
        .iter()
        .flat_map(|p| p.gold.iter().map(move |&c| (*p, c)))
        .collect();
    let spans = explainer.explain(&requests)?;
    let mut masked = Vec::with_capacity(pairs.len());
    let mut cursor = 0;
    for pair in pairs {
        let own: Vec<DialogueSpan> = spans[cursor..cursor + pair.gold.len()].iter().flatten().copied().collect();
        cursor += pair.gold.len();
        masked.push(pair.masked_base(&own, mask_id)?);
    }
    let clean_inputs: Vec<&ModelInput> = pairs.iter().map(|p| &p.base).collect();
    let clean = relation_f1(&rater_predictions(rater, pairs, &clean_inputs, threshold)?)?.f1;
    if clean == 0.0 {
        return Err(DrexError::Evaluation("rater F1 on the clean data is 0; LOO is undefined".into()));
    }
    let masked_inputs: Vec<&ModelInput> = masked.iter().collect();
    let masked_f1 = relation_f1(&rater_predictions(rater, pairs, &masked_inputs, threshold)?)?.f1;
    Ok(LooResult {
        clean_f1: clean,
        masked_f1,
        loo: masked_f1 / clean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Precision,
    Recall,
    Mrr,
    TokenF1,
    ExactMatch,
    Loo,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::F1,
        Metric::Precision,
        Metric::Recall,
        Metric::Mrr,
        Metric::TokenF1,
        Metric::ExactMatch,
        Metric::Loo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "F1",
            Metric::Precision => "P",
            Metric::Recall => "R",
            Metric::Mrr => "MRR",
            Metric::TokenF1 => "token F1",
            Metric::ExactMatch => "EM",
            Metric::Loo => "LOO",
        }
    }
}

/// One run's metrics; absent values were not measured.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mrr: Option<f64>,
    pub token_f1: Option<f64>,
    pub exact_match: Option<f64>,
    pub loo: Option<f64>,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::F1 => self.f1,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::Mrr => self.mrr,
            Metric::TokenF1 => self.token_f1,
            Metric::ExactMatch => self.exact_match,
            Metric::Loo => self.loo,
        }
    }

    fn slot(&mut self, m: Metric) -> &mut Option<f64> {
        match m {
            Metric::F1 => &mut self.f1,
            Metric::Precision => &mut self.precision,
            Metric::Recall => &mut self.recall,
            Metric::Mrr => &mut self.mrr,
            Metric::TokenF1 => &mut self.token_f1,
            Metric::ExactMatch => &mut self.exact_match,
            Metric::Loo => &mut self.loo,
        }
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        *self.slot(m) = Some(v);
    }

    pub fn present(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|&m| self.get(m).is_some()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for m in self.present() {
            let v = self.get(m).unwrap();
            let ok = match m {
                Metric::Mrr | Metric::Loo => v.is_finite() && v >= 0.0,
                _ => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(DrexError::Evaluation(format!("{} = {v} is out of range", m.name())));
            }
        }
        Ok(())
    }

    pub fn with_f1(mut self, f: &F1Score) -> Self {
        self.f1 = Some(f.f1);
        self.precision = Some(f.precision);
        self.recall = Some(f.recall);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean: MetricValues,
    /// Sample standard deviation; only with two or more runs.
    pub std: Option<MetricValues>,
    pub runs: Vec<MetricValues>,
}

impl MetricReport {
    pub fn single(values: MetricValues) -> Self {
        Self {
            mean: values,
            std: None,
            runs: vec![values],
        }
    }
}

/// Elementwise mean and sample standard deviation over runs.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<MetricReport> {
    let Some(first) = reports.first() else {
        return Err(DrexError::Evaluation("no reports to aggregate".into()));
    };
    let metrics = first.mean.present();
    let mut runs = Vec::new();
    for r in reports {
        if r.mean.present() != metrics {
            return Err(DrexError::Evaluation("reports measure different metrics".into()));
        }
        runs.extend(if r.runs.is_empty() { vec![r.mean] } else { r.runs.clone() });
    }
    let n = runs.len() as f64;
    let mut mean = MetricValues::default();
    let mut std = MetricValues::default();
    for &m in &metrics {
        let xs: Vec<f64> = runs.iter().map(|r| r.get(m).unwrap()).collect();
        let mu = xs.iter().sum::<f64>() / n;
        mean.set(m, mu);
        if runs.len() > 1 {
            let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
            std.set(m, var.sqrt());
        }
    }
    Ok(MetricReport {
        mean,
        std: (runs.len() > 1).then_some(std),
        runs,
    })
}

/// Relation F1 and MRR from a prediction dump, plus trigger scores when the
/// dump carries explanations for gold relations.
pub fn evaluate_records(records: &[PredictionRecord], threshold: f64) -> Result<MetricValues> {
    let preds: Vec<RankedPrediction> = records
        .iter()
        .map(|r| RankedPrediction::from_probs(r.pair_id.clone(), &r.probs, threshold, &r.gold))
        .collect();
    let mut values = MetricValues::default().with_f1(&relation_f1(&preds)?);
    values.mrr = Some(mrr(&preds)?);
    let trigger_pairs: Vec<(Option<&str>, Option<&str>)> = records
        .iter()
        .filter(|r| !r.gold_explanations.is_empty())
        .flat_map(|r| {
            r.gold_triggers.iter().map(move |(class, text)| {
                let pred = r
                    .gold_explanations
                    .iter()
                    .find(|e| e.class == *class)
                    .and_then(|e| e.text.as_deref());
                (pred, Some(text.as_str()))
            })
        })
        .collect();
    if let Some(t) = mean_trigger_scores(trigger_pairs) {
        values.token_f1 = Some(t.token_f1);
        values.exact_match = Some(t.exact_match);
    }
    Ok(values)
}

/// Rows of `mean (σ)` in percent, like the results tables.
pub fn render_table(rows: &[(String, MetricReport)], columns: &[Metric]) -> String {
    let cell = |r: &MetricReport, m: Metric| -> String {
        match r.mean.get(m) {
            None => "-".into(),
            Some(v) => match r.std.and_then(|s| s.get(m)) {
                Some(s) => format!("{:.1} ({:.1})", 100.0 * v, 100.0 * s),
                None => format!("{:.1}", 100.0 * v),
            },
        }
    };
    let mut grid = vec![std::iter::once("Model".to_string()).chain(columns.iter().map(|m| m.name().to_string())).collect::<Vec<_>>()];
    for (name, r) in rows {
        grid.push(std::iter::once(name.clone()).chain(columns.iter().map(|&m| cell(r, m))).collect());
    }
    let widths: Vec<usize> = (0..=columns.len())
        .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-|-"));
        }
    }
    out
}
