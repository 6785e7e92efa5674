//! Dialogue data model, DialogRE loading, input construction, trigger
//! alignment and explanation masking.

mod dialogre;
mod input;
mod prepared;
mod schema;

use serde::{Deserialize, Serialize};

pub use dialogre::{
    load_dialogre, parse_dialogre, to_raw_entries, DatasetSplit, LoadReport, RawEntry, RawRelation,
};
pub use input::{
    align_trigger, build_input, mask_span, DialogueSpan, EncodedText, InputBuilder, ModelInput,
    TokenSpan, TriggerSpan,
};
pub use prepared::{prepare_split, GoldTrigger, PairExample, PreparationReport, PreparedSplit};
pub use schema::{relation_to_natural_language, RelationSchema, DIALOGRE_RELATIONS, NO_RELATION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// `speaker: utterance` per turn, joined by newlines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.turns.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&t.speaker);
            out.push_str(": ");
            out.push_str(&t.utterance);
        }
        out
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }
}

/// One relation held by an entity pair, with its trigger when annotated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMention {
    pub label: String,
    /// Classifier index; `None` for the no-relation marker.
    pub class: Option<usize>,
    pub trigger: Option<String>,
}

/// An entity pair of a dialogue together with every relation it holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalTriple {
    pub subject: String,
    pub object: String,
    pub subject_type: String,
    pub object_type: String,
    pub relations: Vec<RelationMention>,
}

impl RelationalTriple {
    pub fn gold_classes(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.relations.iter().filter_map(|m| m.class).collect();
        g.sort_unstable();
        g.dedup();
        g
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub dialogue: Dialogue,
    pub triples: Vec<RelationalTriple>,
}
