//! Prediction heads and their losses.
//!
//! Tensor functions operate on batches and carry gradients; the small value
//! types ([`RelationScores`], [`SpanDistribution`], [`Explanation`]) are the
//! detached per-example views used for decoding, rewards and reporting.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSpan;
use crate::encoder::{Init, Params};
use crate::error::{DrexError, Result};

/// Probabilities are clamped to `[eps, 1 - eps]` before every log.
pub fn clamp_eps(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-12,
        _ => 1e-7,
    }
}

/// W with one row per relation.
#[derive(Debug, Clone)]
pub struct RelationClassifier {
    pub weight: Var,
}

impl RelationClassifier {
    pub fn new<R: Rng>(params: &Params, name: &str, num_relations: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: params.get_or_init(name, &[num_relations, hidden], Init::Normal(0.02), rng)?,
        })
    }

    pub fn num_relations(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        classify(pooled, self.weight.as_tensor())
    }
}

/// Start and end vectors S, E.
#[derive(Debug, Clone)]
pub struct SpanExtractor {
    pub start: Var,
    pub end: Var,
}

impl SpanExtractor {
    pub fn new<R: Rng>(params: &Params, prefix: &str, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            start: params.get_or_init(&format!("{prefix}.start"), &[hidden], Init::Normal(0.02), rng)?,
            end: params.get_or_init(&format!("{prefix}.end"), &[hidden], Init::Normal(0.02), rng)?,
        })
    }

    pub fn forward(&self, hidden: &Tensor, lengths: &[usize]) -> Result<SpanBatch> {
        span_distributions(hidden, lengths, self.start.as_tensor(), self.end.as_tensor())
    }
}

/// P_i = sigmoid(C · W_i) for a (batch, H) or (H) pooled tensor.
pub fn classify(pooled: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, h) = weight.dims2()?;
    let single = pooled.rank() == 1;
    let pooled = if single { pooled.unsqueeze(0)? } else { pooled.clone() };
    if pooled.dim(D::Minus1)? != h {
        return Err(DrexError::Shape(format!(
            "pooled vector has {} dims, classifier expects {h}",
            pooled.dim(D::Minus1)?
        )));
    }
    let probs = candle_nn::ops::sigmoid(&pooled.matmul(&weight.t()?)?)?;
    Ok(if single { probs.squeeze(0)? } else { probs })
}

/// Per-example multi-label cross-entropy averaged over the K relations:
/// `-(1/K) Σ_i y_i log P_i + (1 - y_i) log(1 - P_i)`. Shapes (batch, K) → (batch).
pub fn relation_loss(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if probs.dims() != targets.dims() {
        return Err(DrexError::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dims(),
            targets.dims()
        )));
    }
    let eps = clamp_eps(probs.dtype());
    let p = probs.clamp(eps, 1.0 - eps)?;
    let pos = (targets * p.log()?)?;
    let neg = (targets.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean(D::Minus1)?.neg()?)
}

/// Log-probabilities of span starts and ends over every real (unpadded) token.
#[derive(Debug, Clone)]
pub struct SpanBatch {
    /// (batch, max_len); padding positions hold a large negative value.
    pub start_log_probs: Tensor,
    pub end_log_probs: Tensor,
    pub lengths: Vec<usize>,
}

impl SpanBatch {
    pub fn distribution(&self, row: usize) -> Result<SpanDistribution> {
        let len = self.lengths[row];
        let take = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(row)?
                .narrow(0, 0, len)?
                .exp()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?)
        };
        Ok(SpanDistribution {
            start_probs: take(&self.start_log_probs)?,
            end_probs: take(&self.end_log_probs)?,
        })
    }

    pub fn distributions(&self) -> Result<Vec<SpanDistribution>> {
        (0..self.lengths.len()).map(|r| self.distribution(r)).collect()
    }

    /// log P^S_i + log P^E_j of one chosen span per row, keeping gradients.
    pub fn span_log_probs(&self, spans: &[TokenSpan]) -> Result<(Tensor, Tensor)> {
        let (b, l) = self.start_log_probs.dims2()?;
        if spans.len() != b {
            return Err(DrexError::Shape(format!("{} spans for {b} rows", spans.len())));
        }
        let mut sel_s = vec![0f64; b * l];
        let mut sel_e = vec![0f64; b * l];
        for (row, span) in spans.iter().enumerate() {
            if span.end >= self.lengths[row] || span.start > span.end {
                return Err(DrexError::Input(format!("span {span:?} outside row {row}")));
            }
            sel_s[row * l + span.start] = 1.0;
            sel_e[row * l + span.end] = 1.0;
        }
        let dtype = self.start_log_probs.dtype();
        let sel_s = Tensor::from_vec(sel_s, (b, l), &Device::Cpu)?.to_dtype(dtype)?;
        let sel_e = Tensor::from_vec(sel_e, (b, l), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((
            (&self.start_log_probs * sel_s)?.sum(D::Minus1)?,
            (&self.end_log_probs * sel_e)?.sum(D::Minus1)?,
        ))
    }
}

/// Softmax of S·T_i and E·T_i over all tokens of each input.
pub fn span_distributions(hidden: &Tensor, lengths: &[usize], start: &Tensor, end: &Tensor) -> Result<SpanBatch> {
    let (b, l, h) = hidden.dims3()?;
    if start.dims() != [h] || end.dims() != [h] {
        return Err(DrexError::Shape(format!(
            "start/end vectors {:?}/{:?} vs hidden size {h}",
            start.dims(),
            end.dims()
        )));
    }
    if lengths.len() != b || lengths.iter().any(|&n| n == 0 || n > l) {
        return Err(DrexError::Shape(format!("lengths {lengths:?} for a ({b}, {l}) batch")));
    }
    let mut bias = Vec::with_capacity(b * l);
    for &n in lengths {
        bias.extend(std::iter::repeat_n(0f64, n));
        bias.extend(std::iter::repeat_n(-1e9f64, l - n));
    }
    let bias = Tensor::from_vec(bias, (b, l), &Device::Cpu)?.to_dtype(hidden.dtype())?;
    let flat = hidden.reshape((b * l, h))?;
    let logits = |v: &Tensor| -> Result<Tensor> {
        Ok((flat.matmul(&v.unsqueeze(1)?)?.reshape((b, l))? + &bias)?)
    };
    Ok(SpanBatch {
        start_log_probs: candle_nn::ops::log_softmax(&logits(start)?, D::Minus1)?,
        end_log_probs: candle_nn::ops::log_softmax(&logits(end)?, D::Minus1)?,
        lengths: lengths.to_vec(),
    })
}

/// Dialogue region of one row: `prefix_len .. prefix_len + dialogue_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub prefix_len: usize,
    pub dialogue_len: usize,
}

/// Per-token binary cross-entropy of the start and end distributions against
/// one-hot gold labels, summed over dialogue tokens and divided by |d|.
pub fn span_loss(batch: &SpanBatch, gold: &[TokenSpan], regions: &[Region]) -> Result<Tensor> {
    let (b, l) = batch.start_log_probs.dims2()?;
    if gold.len() != b || regions.len() != b {
        return Err(DrexError::Shape(format!(
            "{} gold spans and {} regions for {b} rows",
            gold.len(),
            regions.len()
        )));
    }
    let mut ys = vec![0f64; b * l];
    let mut ye = vec![0f64; b * l];
    let mut mask = vec![0f64; b * l];
    let mut inv_d = vec![0f64; b];
    for row in 0..b {
        let Region { prefix_len, dialogue_len } = regions[row];
        let g = gold[row];
        let end = prefix_len + dialogue_len;
        if dialogue_len == 0 || g.start < prefix_len || g.end >= end || g.start > g.end || end > batch.lengths[row] {
            return Err(DrexError::Bounds {
                start: g.start,
                end: g.end,
                region_start: prefix_len,
                region_end: end,
            });
        }
        ys[row * l + g.start] = 1.0;
        ye[row * l + g.end] = 1.0;
        for m in &mut mask[row * l + prefix_len..row * l + end] {
            *m = 1.0;
        }
        inv_d[row] = 1.0 / dialogue_len as f64;
    }
    let dtype = batch.start_log_probs.dtype();
    let dev = Device::Cpu;
    let t = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, l), &dev)?.to_dtype(dtype)?) };
    let (ys, ye, mask) = (t(ys)?, t(ye)?, t(mask)?);
    let inv_d = Tensor::from_vec(inv_d, b, &dev)?.to_dtype(dtype)?;

    let eps = clamp_eps(dtype);
    let log_eps = eps.ln();
    let term = |log_p: &Tensor, y: &Tensor| -> Result<Tensor> {
        let log_p_clamped = log_p.maximum(log_eps)?;
        let log_not_p = log_p.exp()?.affine(-1.0, 1.0)?.clamp(eps, 1.0)?.log()?;
        Ok(((y * log_p_clamped)? + (y.affine(-1.0, 1.0)? * log_not_p)?)?)
    };
    let per_token = (term(&batch.start_log_probs, &ys)? + term(&batch.end_log_probs, &ye)?)?;
    let summed = (per_token * mask)?.sum(D::Minus1)?;
    Ok((summed * inv_d)?.neg()?)
}

/// L_J = α L_RE + (1 − α) L_EX.
pub fn joint_loss(l_re: f64, l_ex: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_re + (1.0 - alpha) * l_ex)
}

pub fn joint_loss_tensor(l_re: &Tensor, l_ex: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    Ok(((l_re * alpha)? + (l_ex * (1.0 - alpha))?)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(DrexError::Config(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// Independent sigmoid probabilities, one per relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub probs: Vec<f64>,
}

impl RelationScores {
    pub fn from_tensor(probs: &Tensor) -> Result<Vec<Self>> {
        Ok(probs
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(|probs| Self { probs })
            .collect())
    }

    /// Relation indices by descending probability; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx
    }

    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut r = self.ranking();
        r.truncate(k);
        r
    }
}

/// Start/end probabilities over the tokens of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistribution {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// A decoded span (absolute positions) or the no-explanation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub span: Option<TokenSpan>,
    /// (log P^S_i, log P^E_j) of the chosen span under the full distributions.
    pub log_probs: Option<(f64, f64)>,
}

impl Explanation {
    pub fn none() -> Self {
        Self {
            span: None,
            log_probs: None,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(weights: &[f64], offset: usize, rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return offset + rng.gen_range(0..weights.len());
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return offset + i;
        }
        u -= w;
    }
    offset + weights.len() - 1
}

/// Greedy: argmax start and end; abstain when either falls in the first
/// `prefix_len` tokens; an end outside `[i, i + max_span_len)` is replaced by
/// the best end inside that window. Sample: draw the start from the dialogue
/// region and the end from the window after it.
pub fn decode_explanation<R: Rng>(
    dist: &SpanDistribution,
    prefix_len: usize,
    max_span_len: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Explanation {
    let n = dist.start_probs.len();
    if prefix_len >= n || max_span_len == 0 {
        return Explanation::none();
    }
    let window_end = |i: usize| (i + max_span_len).min(n);
    let (i, j) = match mode {
        DecodeMode::Greedy => {
            let i = argmax(&dist.start_probs);
            let j = argmax(&dist.end_probs);
            if i < prefix_len || j < prefix_len {
                return Explanation::none();
            }
            if j >= i && j < window_end(i) {
                (i, j)
            } else {
                (i, i + argmax(&dist.end_probs[i..window_end(i)]))
            }
        }
        DecodeMode::Sample => {
            let i = sample_index(&dist.start_probs[prefix_len..], prefix_len, rng);
            let j = sample_index(&dist.end_probs[i..window_end(i)], i, rng);
            (i, j)
        }
    };
    Explanation {
        span: Some(TokenSpan::new(i, j)),
        log_probs: Some((dist.start_probs[i].ln(), dist.end_probs[j].ln())),
    }
}
