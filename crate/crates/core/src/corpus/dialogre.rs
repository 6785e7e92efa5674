//! DialogRE JSON layout: a list of `[turn_strings, relation_objects]` entries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::RelationSchema;
use super::{Dialogue, DialogueExample, RelationMention, RelationalTriple, Turn};
use crate::error::{DrexError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRelation {
    pub x: String,
    pub y: String,
    #[serde(default)]
    pub x_type: String,
    #[serde(default)]
    pub y_type: String,
    pub r: Vec<String>,
    #[serde(default)]
    pub rid: Vec<u32>,
    #[serde(default)]
    pub t: Vec<String>,
}

/// One entry of the published layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEntry(pub Vec<String>, pub Vec<RawRelation>);

/// Counts produced while loading a split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub split: String,
    pub dialogues: usize,
    pub entity_pairs: usize,
    pub triples: usize,
    pub triggers: usize,
    /// Triggers whose text occurs verbatim in the rendered dialogue.
    pub triggers_in_text: usize,
    /// Triggers flagged unalignable at load time (not a verbatim substring).
    pub triggers_unalignable: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub split_name: String,
    pub examples: Vec<DialogueExample>,
    pub report: LoadReport,
}

impl DatasetSplit {
    pub fn triples(&self) -> impl Iterator<Item = &RelationalTriple> {
        self.examples.iter().flat_map(|e| e.triples.iter())
    }
}

pub fn load_dialogre(
    path: impl AsRef<Path>,
    split_name: &str,
    schema: &RelationSchema,
) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_dialogre(&text, split_name, schema)
}

pub fn parse_dialogre(json: &str, split_name: &str, schema: &RelationSchema) -> Result<DatasetSplit> {
    let entries: Vec<serde_json::Value> =
        serde_json::from_str(json).map_err(|e| DrexError::Parse {
            index: 0,
            message: format!("top level is not a JSON list: {e}"),
        })?;

    let mut report = LoadReport {
        split: split_name.to_string(),
        ..Default::default()
    };
    let mut examples = Vec::with_capacity(entries.len());

    for (index, value) in entries.into_iter().enumerate() {
        let RawEntry(turns, relations) =
            serde_json::from_value(value).map_err(|e| DrexError::Parse {
                index,
                message: e.to_string(),
            })?;
        let dialogue = parse_dialogue(format!("{split_name}-{index}"), &turns)
            .map_err(|message| DrexError::Parse { index, message })?;
        let text = dialogue.render();

        let mut triples = Vec::with_capacity(relations.len());
        for raw in relations {
            if raw.r.is_empty() {
                return Err(DrexError::Parse {
                    index,
                    message: format!("entity pair ({}, {}) has no relations", raw.x, raw.y),
                });
            }
            let mut mentions = Vec::with_capacity(raw.r.len());
            for (k, label) in raw.r.iter().enumerate() {
                let class = schema.resolve(label)?;
                let trigger = raw
                    .t
                    .get(k)
                    .map(|t| t.trim())
                    .filter(|t| !t.is_empty())
                    .map(str::to_string);
                if let Some(t) = &trigger {
                    report.triggers += 1;
                    if text.contains(t.as_str()) {
                        report.triggers_in_text += 1;
                    } else {
                        report.triggers_unalignable += 1;
                    }
                }
                mentions.push(RelationMention {
                    label: label.clone(),
                    class,
                    trigger,
                });
            }
            report.triples += mentions.len();
            report.entity_pairs += 1;
            triples.push(RelationalTriple {
                subject: raw.x,
                object: raw.y,
                subject_type: raw.x_type,
                object_type: raw.y_type,
                relations: mentions,
            });
        }
        report.dialogues += 1;
        examples.push(DialogueExample { dialogue, triples });
    }

    Ok(DatasetSplit {
        split_name: split_name.to_string(),
        examples,
        report,
    })
}

fn parse_dialogue(id: String, turns: &[String]) -> Result<Dialogue, String> {
    if turns.is_empty() {
        return Err("dialogue has no turns".into());
    }
    let turns = turns
        .iter()
        .map(|line| match line.split_once(':') {
            Some((speaker, utterance)) if !speaker.trim().is_empty() => Ok(Turn {
                speaker: speaker.to_string(),
                utterance: utterance.strip_prefix(' ').unwrap_or(utterance).to_string(),
            }),
            _ => Err(format!("turn without a speaker: {line:?}")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dialogue { id, turns })
}

/// Inverse of the loader, used to write generated corpora in the same layout.
pub fn to_raw_entries(examples: &[DialogueExample]) -> Vec<RawEntry> {
    examples
        .iter()
        .map(|ex| {
            let turns = ex
                .dialogue
                .turns
                .iter()
                .map(|t| format!("{}: {}", t.speaker, t.utterance))
                .collect();
            let rels = ex
                .triples
                .iter()
                .map(|tr| RawRelation {
                    x: tr.subject.clone(),
                    y: tr.object.clone(),
                    x_type: tr.subject_type.clone(),
                    y_type: tr.object_type.clone(),
                    r: tr.relations.iter().map(|m| m.label.clone()).collect(),
                    rid: tr
                        .relations
                        .iter()
                        .map(|m| m.class.map(|c| c as u32 + 1).unwrap_or(0))
                        .collect(),
                    t: tr
                        .relations
                        .iter()
                        .map(|m| m.trigger.clone().unwrap_or_default())
                        .collect(),
                })
                .collect();
            RawEntry(turns, rels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"[
      [
        ["Speaker 1: Hey, you're my friend!", "Speaker 2: Chandler is your friend too.", "Speaker 1: Sure."],
        [
          {"x": "Speaker 1", "y": "Chandler", "x_type": "PER", "y_type": "PER",
           "r": ["per:friends", "per:positive_impression"], "rid": [9, 1], "t": ["your friend", ""]},
          {"x": "Speaker 2", "y": "Speaker 1", "x_type": "PER", "y_type": "PER",
           "r": ["unanswerable"], "rid": [37], "t": [""]}
        ]
      ]
    ]"#;

    #[test]
    fn empty_list_gives_empty_split() {
        let split = parse_dialogre("[]", "train", &RelationSchema::dialogre()).unwrap();
        assert!(split.examples.is_empty());
        assert_eq!(split.report.triples, 0);
    }

    #[test]
    fn fixture_counts_triples_per_relation() {
        let split = parse_dialogre(FIXTURE, "dev", &RelationSchema::dialogre()).unwrap();
        assert_eq!(split.examples.len(), 1);
        let ex = &split.examples[0];
        assert_eq!(ex.triples.len(), 2);
        // the first pair holds two relations: two relational triples
        assert_eq!(ex.triples[0].relations.len(), 2);
        assert_eq!(split.report.triples, 3);
        assert_eq!(split.report.entity_pairs, 2);
        assert_eq!(split.report.triggers, 1);
        assert_eq!(split.report.triggers_in_text, 1);
        assert_eq!(ex.triples[0].relations[1].trigger, None);
        assert_eq!(ex.triples[1].gold_classes(), Vec::<usize>::new());
    }

    #[test]
    fn rendering_reproduces_turn_strings() {
        let split = parse_dialogre(FIXTURE, "dev", &RelationSchema::dialogre()).unwrap();
        let d = &split.examples[0].dialogue;
        assert_eq!(
            d.render(),
            "Speaker 1: Hey, you're my friend!\nSpeaker 2: Chandler is your friend too.\nSpeaker 1: Sure."
        );
        assert_eq!(d.render(), d.render());
    }

    #[test]
    fn unknown_label_names_the_label() {
        let bad = FIXTURE.replace("per:positive_impression", "per:archenemy");
        match parse_dialogre(&bad, "dev", &RelationSchema::dialogre()) {
            Err(DrexError::Schema(label)) => assert_eq!(label, "per:archenemy"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_entry_reports_its_index() {
        let bad = r#"[[["A: hi"], []], {"oops": 1}]"#;
        match parse_dialogre(bad, "dev", &RelationSchema::dialogre()) {
            Err(DrexError::Parse { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn raw_round_trip_preserves_counts() {
        let schema = RelationSchema::dialogre();
        let split = parse_dialogre(FIXTURE, "dev", &schema).unwrap();
        let json = serde_json::to_string(&to_raw_entries(&split.examples)).unwrap();
        let again = parse_dialogre(&json, "dev", &schema).unwrap();
        assert_eq!(again.report, split.report);
        assert_eq!(again.examples[0].dialogue.render(), split.examples[0].dialogue.render());
    }
}
