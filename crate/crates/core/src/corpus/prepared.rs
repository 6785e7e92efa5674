//! Entity-pair examples ready for the models: tokenized once, with gold
//! labels as a multi-hot vector and triggers aligned on the explainer input.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::input::{align_trigger, mask_span, DialogueSpan, EncodedText, InputBuilder, ModelInput};
use super::{DatasetSplit, RelationSchema};
use crate::error::Result;

/// A trigger for one gold relation, located in the dialogue when possible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTrigger {
    pub class: usize,
    pub text: String,
    /// `None` when the text could not be aligned to token boundaries in the
    /// kept part of the dialogue.
    pub span: Option<DialogueSpan>,
}

#[derive(Debug, Clone)]
pub struct PairExample {
    /// `{dialogue id}#{pair index}`.
    pub id: String,
    pub dialogue_id: String,
    pub dialogue: Arc<EncodedText>,
    pub subject: String,
    pub object: String,
    pub gold: Vec<usize>,
    pub targets: Vec<f64>,
    /// `(s, o, d)` input used by R and for masking.
    pub base: ModelInput,
    pub triggers: Vec<GoldTrigger>,
}

impl PairExample {
    /// `(r, s, o, d)` with the relation's natural-language phrase.
    pub fn explainer_input(&self, builder: &InputBuilder, schema: &RelationSchema, class: usize) -> Result<ModelInput> {
        let phrase = schema.phrase_at(class);
        builder.build(Some(&phrase), &self.subject, &self.object, &self.dialogue)
    }

    /// `(ex, s, o, d)`; without an explanation this is the base layout.
    pub fn reranker_input(&self, builder: &InputBuilder, explanation: Option<&str>) -> Result<ModelInput> {
        builder.build(explanation, &self.subject, &self.object, &self.dialogue)
    }

    pub fn trigger_for(&self, class: usize) -> Option<&GoldTrigger> {
        self.triggers.iter().find(|t| t.class == class)
    }

    pub fn aligned_trigger(&self, class: usize) -> Option<DialogueSpan> {
        self.trigger_for(class).and_then(|t| t.span)
    }

    pub fn span_text(&self, span: DialogueSpan) -> Option<&str> {
        self.base.span_text(&self.dialogue.text, span)
    }

    /// Base input with every given span replaced by the mask id. Spans lying
    /// past the kept dialogue are a bounds error.
    pub fn masked_base(&self, spans: &[DialogueSpan], mask_id: u32) -> Result<ModelInput> {
        let mut input = self.base.clone();
        for &span in spans {
            let absolute = self.base.to_absolute(span).ok_or(crate::DrexError::Bounds {
                start: span.start + self.base.prefix_len,
                end: span.end + self.base.prefix_len,
                region_start: self.base.prefix_len,
                region_end: self.base.prefix_len + self.base.dialogue_len,
            })?;
            input = mask_span(&input, Some(absolute), mask_id)?;
        }
        Ok(input)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparationReport {
    pub pairs: usize,
    pub pairs_without_relation: usize,
    pub triggers: usize,
    pub triggers_aligned: usize,
    pub triggers_unaligned: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub name: String,
    pub pairs: Vec<PairExample>,
    pub report: PreparationReport,
}

impl PreparedSplit {
    pub fn refs(&self) -> Vec<&PairExample> {
        self.pairs.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn prepare_split(split: &DatasetSplit, builder: &InputBuilder, schema: &RelationSchema) -> Result<PreparedSplit> {
    let mut pairs = Vec::new();
    let mut report = PreparationReport::default();
    for example in &split.examples {
        let dialogue = Arc::new(builder.encode_dialogue(&example.dialogue)?);
        for (index, triple) in example.triples.iter().enumerate() {
            let gold = triple.gold_classes();
            let base = builder.build(None, &triple.subject, &triple.object, &dialogue)?;
            let mut pair = PairExample {
                id: format!("{}#{index}", example.dialogue.id),
                dialogue_id: example.dialogue.id.clone(),
                dialogue: dialogue.clone(),
                subject: triple.subject.clone(),
                object: triple.object.clone(),
                targets: schema.multi_hot(&gold),
                gold,
                base,
                triggers: Vec::new(),
            };
            for mention in &triple.relations {
                let (Some(class), Some(text)) = (mention.class, mention.trigger.as_ref()) else {
                    continue;
                };
                if pair.trigger_for(class).is_some() {
                    continue;
                }
                report.triggers += 1;
                let ex_input = pair.explainer_input(builder, schema, class)?;
                let span = align_trigger(text, &ex_input, &dialogue.text)
                    .map(|t| ex_input.to_dialogue(t.span()))
                    .transpose()?;
                if span.is_some() {
                    report.triggers_aligned += 1;
                } else {
                    report.triggers_unaligned += 1;
                }
                pair.triggers.push(GoldTrigger {
                    class,
                    text: text.clone(),
                    span,
                });
            }
            report.pairs += 1;
            if pair.gold.is_empty() {
                report.pairs_without_relation += 1;
            }
            pairs.push(pair);
        }
    }
    Ok(PreparedSplit {
        name: split.split_name.clone(),
        pairs,
        report,
    })
}
