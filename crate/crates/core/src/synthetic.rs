//! Planted-trigger dialogue corpus for desk-scale experiments. Every gold
//! relation is signaled by one of its own trigger phrases inside a single
//! turn; filler words never overlap trigger words.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    parse_dialogre, to_raw_entries, DatasetSplit, Dialogue, DialogueExample, RelationMention, RelationSchema,
    RelationalTriple, Turn, NO_RELATION,
};
use crate::error::{DrexError, Result};

/// Relation labels with their trigger phrases.
pub const SYNTHETIC_RELATIONS: [(&str, &[&str]); 8] = [
    ("per:friends", &["best friend", "buddy", "pal"]),
    ("per:spouse", &["wife", "husband", "spouse"]),
    ("per:siblings", &["sister", "brother", "twin sibling"]),
    ("per:boss", &["boss", "manager", "supervisor"]),
    ("per:roommate", &["roommate", "flatmate"]),
    ("per:parents", &["mother", "father", "mom"]),
    ("per:girl/boyfriend", &["girlfriend", "boyfriend", "steady date"]),
    ("per:neighbor", &["neighbor", "next door neighbor"]),
];

const NAMES: [&str; 20] = [
    "Alice", "Bruno", "Carla", "Dmitri", "Elena", "Farid", "Greta", "Hector", "Ines", "Jonas", "Kira", "Lucas",
    "Marta", "Nico", "Olga", "Pavel", "Rosa", "Stefan", "Tanja", "Viktor",
];

const FILLER: [&str; 64] = [
    "the", "weather", "was", "nice", "today", "we", "went", "to", "a", "coffee", "shop", "and", "then", "walked",
    "around", "park", "it", "rained", "later", "so", "came", "back", "home", "did", "you", "see", "that", "movie",
    "yesterday", "no", "yes", "maybe", "tomorrow", "i", "think", "pizza", "sounds", "great", "really", "what",
    "about", "dinner", "tonight", "okay", "sure", "fine", "music", "was", "loud", "at", "party", "train", "late",
    "again", "bought", "new", "shoes", "forgot", "keys", "car", "broke", "down", "funny", "story",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Share of pairs holding two relations.
    pub multi_relation_rate: f64,
    /// Share of pairs holding no relation (no trigger in the dialogue).
    pub no_relation_rate: f64,
    /// Share of training triggers that keep their annotation.
    pub train_trigger_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            train_pairs: 600,
            dev_pairs: 150,
            test_pairs: 150,
            min_turns: 6,
            max_turns: 12,
            min_words: 3,
            max_words: 7,
            multi_relation_rate: 0.15,
            no_relation_rate: 0.1,
            train_trigger_rate: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DrexError::Config(m.to_string()));
        if self.min_turns < 2 || self.min_turns > self.max_turns {
            return bad("turn range must satisfy 2 <= min <= max");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("word range must satisfy 1 <= min <= max");
        }
        for r in [self.multi_relation_rate, self.no_relation_rate, self.train_trigger_rate] {
            if !(0.0..=1.0).contains(&r) {
                return bad("rates must lie in [0, 1]");
            }
        }
        if self.multi_relation_rate + self.no_relation_rate > 1.0 {
            return bad("multi-relation and no-relation rates exceed 1 together");
        }
        if self.train_pairs == 0 || self.dev_pairs == 0 || self.test_pairs == 0 {
            return bad("every split needs at least one pair");
        }
        Ok(())
    }
}

pub fn synthetic_schema() -> RelationSchema {
    RelationSchema::new(
        SYNTHETIC_RELATIONS.iter().map(|(l, _)| l.to_string()).collect(),
        Some(NO_RELATION.to_string()),
    )
    .expect("static schema is valid")
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub schema: RelationSchema,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

fn filler_sentence<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> String {
    let n = rng.gen_range(cfg.min_words..=cfg.max_words);
    (0..n).map(|_| *FILLER.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn generate_pair<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, id: String, annotate: f64) -> DialogueExample {
    let num_turns = rng.gen_range(cfg.min_turns..=cfg.max_turns);
    let speakers = rng.gen_range(2..=3);
    let mut turns: Vec<Turn> = (0..num_turns)
        .map(|i| Turn {
            speaker: format!("Speaker {}", i % speakers + 1),
            utterance: filler_sentence(rng, cfg),
        })
        .collect();

    let object = *NAMES.choose(rng).unwrap();
    let roll: f64 = rng.gen();
    let n_relations = if roll < cfg.no_relation_rate {
        0
    } else if roll < cfg.no_relation_rate + cfg.multi_relation_rate {
        2
    } else {
        1
    };
    let subject_turn = rng.gen_range(0..num_turns);
    let subject = turns[subject_turn].speaker.clone();

    let mut classes: Vec<usize> = (0..SYNTHETIC_RELATIONS.len()).collect();
    classes.shuffle(rng);
    let mut slots: Vec<usize> = (0..num_turns).filter(|&i| turns[i].speaker == subject).collect();
    slots.shuffle(rng);
    let mut relations = Vec::new();
    let mut trigger_turns = Vec::new();
    for (&class, &turn) in classes.iter().take(n_relations).zip(slots.iter()) {
        let (label, triggers) = SYNTHETIC_RELATIONS[class];
        let trigger = *triggers.choose(rng).unwrap();
        let before = filler_sentence(rng, cfg);
        turns[turn].utterance = format!("{before} {object} is my {trigger}");
        trigger_turns.push(turn);
        relations.push(RelationMention {
            label: label.to_string(),
            class: Some(class),
            trigger: rng.gen_bool(annotate).then(|| trigger.to_string()),
        });
    }
    // the object's name also appears away from any trigger
    let plain: Vec<usize> = (0..num_turns).filter(|i| !trigger_turns.contains(i)).collect();
    if let Some(&turn) = plain.choose(rng) {
        turns[turn].utterance = format!("{} {object}", turns[turn].utterance);
    }
    if relations.is_empty() {
        relations.push(RelationMention {
            label: NO_RELATION.to_string(),
            class: None,
            trigger: None,
        });
    }
    DialogueExample {
        dialogue: Dialogue { id, turns },
        triples: vec![RelationalTriple {
            subject,
            object: object.to_string(),
            subject_type: "PER".into(),
            object_type: "PER".into(),
            relations,
        }],
    }
}

fn generate_split<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, name: &str, pairs: usize, annotate: f64, schema: &RelationSchema) -> Result<DatasetSplit> {
    let examples: Vec<DialogueExample> = (0..pairs)
        .map(|i| generate_pair(rng, cfg, format!("{name}-{i}"), annotate))
        .collect();
    let json = serde_json::to_string(&to_raw_entries(&examples))?;
    parse_dialogre(&json, name, schema)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let schema = synthetic_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_split(&mut rng, cfg, "train", cfg.train_pairs, cfg.train_trigger_rate, &schema)?;
    let dev = generate_split(&mut rng, cfg, "dev", cfg.dev_pairs, 1.0, &schema)?;
    let test = generate_split(&mut rng, cfg, "test", cfg.test_pairs, 1.0, &schema)?;
    Ok(SyntheticCorpus {
        schema,
        train,
        dev,
        test,
    })
}

impl SyntheticCorpus {
    /// `train.json`, `dev.json`, `test.json` in DialogRE layout plus
    /// `schema.json` and the generator settings.
    pub fn write(&self, dir: impl AsRef<Path>, cfg: &SyntheticConfig) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for split in [&self.train, &self.dev, &self.test] {
            let raw = to_raw_entries(&split.examples);
            std::fs::write(dir.join(format!("{}.json", split.split_name)), serde_json::to_vec_pretty(&raw)?)?;
        }
        std::fs::write(dir.join("schema.json"), serde_json::to_vec_pretty(&self.schema)?)?;
        std::fs::write(dir.join("generator.json"), serde_json::to_vec_pretty(cfg)?)?;
        Ok(())
    }

    pub fn texts(&self) -> Vec<String> {
        let mut out: Vec<String> = [&self.train, &self.dev, &self.test]
            .iter()
            .flat_map(|s| s.examples.iter())
            .flat_map(|e| {
                std::iter::once(e.dialogue.render()).chain(e.triples.iter().flat_map(|t| [t.subject.clone(), t.object.clone()]))
            })
            .collect();
        out.extend((0..self.schema.len()).map(|i| self.schema.phrase_at(i)));
        out
    }
}

/// Trigger phrase words, for checking that filler never contains them.
pub fn trigger_words() -> Vec<&'static str> {
    SYNTHETIC_RELATIONS
        .iter()
        .flat_map(|(_, ts)| ts.iter().flat_map(|t| t.split(' ')))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_pairs: 40,
            dev_pairs: 10,
            test_pairs: 10,
            ..Default::default()
        }
    }

    #[test]
    fn filler_and_triggers_are_disjoint() {
        let tw = trigger_words();
        for f in FILLER {
            assert!(!tw.contains(&f), "{f}");
        }
        for n in NAMES {
            assert!(!tw.contains(&n.to_lowercase().as_str()));
        }
    }

    #[test]
    fn dialogues_respect_turn_range_and_triggers_occur() {
        let cfg = small();
        let c = generate(&cfg).unwrap();
        for split in [&c.train, &c.dev, &c.test] {
            for ex in &split.examples {
                let n = ex.dialogue.num_turns();
                assert!((cfg.min_turns..=cfg.max_turns).contains(&n));
                let text = ex.dialogue.render();
                for m in ex.triples.iter().flat_map(|t| &t.relations) {
                    if let Some(t) = &m.trigger {
                        assert!(text.contains(t.as_str()));
                    }
                }
            }
        }
        let full: usize = c.test.triples().flat_map(|t| &t.relations).filter(|m| m.class.is_some()).count();
        let labeled: usize = c.test.triples().flat_map(|t| &t.relations).filter(|m| m.trigger.is_some()).count();
        assert_eq!(full, labeled);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train.examples, b.train.examples);
        let c = generate(&SyntheticConfig { seed: 99, ..small() }).unwrap();
        assert_ne!(a.train.examples, c.train.examples);
    }
}
