use serde::{Deserialize, Serialize};

use crate::error::{DrexError, Result};

/// The 36 DialogRE relation types, in the dataset's `rid` order (1-based in the files).
pub const DIALOGRE_RELATIONS: [&str; 36] = [
    "per:positive_impression",
    "per:negative_impression",
    "per:acquaintance",
    "per:alumni",
    "per:boss",
    "per:subordinate",
    "per:client",
    "per:dates",
    "per:friends",
    "per:girl/boyfriend",
    "per:neighbor",
    "per:roommate",
    "per:children",
    "per:other_family",
    "per:parents",
    "per:siblings",
    "per:spouse",
    "per:place_of_residence",
    "per:place_of_birth",
    "per:visited_place",
    "per:origin",
    "per:employee_or_member_of",
    "per:schools_attended",
    "per:works",
    "per:age",
    "per:date_of_birth",
    "per:major",
    "per:place_of_work",
    "per:title",
    "per:alternate_names",
    "per:pet",
    "gpe:residents_of_place",
    "gpe:births_in_place",
    "gpe:visitors_of_place",
    "org:employees_or_members",
    "org:students",
];

/// The DialogRE "no relation" marker. It never receives a classifier index.
pub const NO_RELATION: &str = "unanswerable";

/// A fixed, ordered set of relation labels. The order defines the classifier rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    labels: Vec<String>,
    #[serde(default)]
    no_relation: Option<String>,
}

impl RelationSchema {
    pub fn new(labels: Vec<String>, no_relation: Option<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(DrexError::Config("relation schema is empty".into()));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(DrexError::Config("empty relation label in schema".into()));
            }
            if labels[..i].contains(label) || no_relation.as_deref() == Some(label.as_str()) {
                return Err(DrexError::Config(format!("duplicate relation label `{label}`")));
            }
        }
        Ok(Self { labels, no_relation })
    }

    /// The DialogRE schema: K = 36 plus the `unanswerable` marker.
    pub fn dialogre() -> Self {
        Self {
            labels: DIALOGRE_RELATIONS.iter().map(|s| s.to_string()).collect(),
            no_relation: Some(NO_RELATION.to_string()),
        }
    }

    /// Number of classifiable relations (K).
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn no_relation(&self) -> Option<&str> {
        self.no_relation.as_deref()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Whether the label is known, either as a relation or as the no-relation marker.
    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some() || self.no_relation.as_deref() == Some(label)
    }

    /// Resolve a label to its classifier index; `Ok(None)` for the no-relation marker.
    pub fn resolve(&self, label: &str) -> Result<Option<usize>> {
        if let Some(i) = self.index_of(label) {
            Ok(Some(i))
        } else if self.no_relation.as_deref() == Some(label) {
            Ok(None)
        } else {
            Err(DrexError::Schema(label.to_string()))
        }
    }

    pub fn multi_hot(&self, gold: &[usize]) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        for &g in gold {
            y[g] = 1.0;
        }
        y
    }

    /// Natural-language phrasing of a label, used as the explainer's relation prefix.
    pub fn natural_language(&self, label: &str) -> Result<String> {
        if !self.contains(label) {
            return Err(DrexError::Schema(label.to_string()));
        }
        Ok(phrase(label))
    }

    pub fn phrase_at(&self, index: usize) -> String {
        phrase(&self.labels[index])
    }
}

/// `per:positive_impression` becomes `person positive impression`.
pub fn relation_to_natural_language(label: &str) -> Result<String> {
    RelationSchema::dialogre().natural_language(label)
}

fn phrase(label: &str) -> String {
    let (namespace, rest) = match label.split_once(':') {
        Some((ns, rest)) => (Some(ns), rest),
        None => (None, label),
    };
    let rest = rest.replace('_', " ");
    match namespace {
        Some("per") => format!("person {rest}"),
        Some(ns) => format!("{ns} {rest}"),
        None => rest,
    }
}
