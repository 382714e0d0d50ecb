//! Dataset ingestion and preparation.
//!
//! Examples enter as [`RawExample`]s (string tokens, anonymized entities
//! written `@entityN`), get filtered by [`validate_examples`], canonicalized by
//! [`relabel_entities`], and are finally mapped to token ids by a
//! [`Vocabulary`] to become [`ClozeExample`]s.

mod batch;
mod canonical;
mod cnn;
mod embeddings;
mod synthetic;
mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{epoch_order, make_batches, Batch};
pub use canonical::{from_jsonl_line, read_canonical, to_jsonl_line, write_canonical};
pub use cnn::{export_cnn_format, import_cnn_format, parse_cnn_format};
pub use embeddings::{load_pretrained_embeddings, parse_embeddings, uniform_table, PretrainedEmbeddings};
pub use synthetic::{generate_synthetic_task, solve, SyntheticRule, SyntheticTaskSpec};
pub use vocab::{Vocabulary, BLANK_ID, PAD_ID, UNK_ID};

/// The cloze blank inside a question.
pub const BLANK: &str = "@blank";
/// What the CNN files use for the blank.
pub const CNN_PLACEHOLDER: &str = "@placeholder";
pub const ENTITY_PREFIX: &str = "@entity";

/// `N` for a token of the form `@entityN`.
pub fn entity_number(token: &str) -> Option<usize> {
    let digits = token.strip_prefix(ENTITY_PREFIX)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn entity_symbol(n: usize) -> String {
    format!("{ENTITY_PREFIX}{n}")
}

/// A cloze example as text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: u64,
    pub url: Option<String>,
    pub passage: Vec<String>,
    pub question: Vec<String>,
    pub answer: String,
    /// Entity symbol to surface string, when known.
    pub entities: BTreeMap<String, String>,
}

impl RawExample {
    pub fn blank_count(&self) -> usize {
        self.question.iter().filter(|t| *t == BLANK).count()
    }

    pub fn answer_in_passage(&self) -> bool {
        self.passage.contains(&self.answer)
    }

    /// Entity symbols occurring in the passage, sorted by entity number.
    pub fn candidates(&self) -> Vec<String> {
        let set: BTreeSet<usize> = self.passage.iter().filter_map(|t| entity_number(t)).collect();
        set.into_iter().map(entity_symbol).collect()
    }
}

/// A cloze example as token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeExample {
    pub id: u64,
    pub passage: Vec<usize>,
    pub question: Vec<usize>,
    /// Entity number `N` of the answer `@entityN`.
    pub answer: usize,
    /// Entity numbers occurring in the passage, ascending.
    pub candidates: Vec<usize>,
}

impl ClozeExample {
    /// Checks the blank and answerability invariants.
    pub fn check(&self) -> Result<()> {
        let blanks = self.question.iter().filter(|&&t| t == BLANK_ID).count();
        if blanks != 1 {
            return Err(Error::InvalidExample {
                id: self.id,
                reason: format!("question has {blanks} blanks"),
            });
        }
        if !self.candidates.contains(&self.answer) {
            return Err(Error::InvalidExample {
                id: self.id,
                reason: format!("answer @entity{} not among passage entities", self.answer),
            });
        }
        Ok(())
    }
}

/// Renumbers entity symbols in order of first occurrence, scanning the
/// passage and then the question. The entity map keeps only symbols that
/// occur in the text.
pub fn relabel_entities(example: &RawExample) -> Result<RawExample> {
    let mut map: HashMap<&str, String> = HashMap::new();
    for tok in example.passage.iter().chain(&example.question) {
        if entity_number(tok).is_some() && !map.contains_key(tok.as_str()) {
            let next = entity_symbol(map.len());
            map.insert(tok, next);
        }
    }
    let answer = map
        .get(example.answer.as_str())
        .cloned()
        .ok_or_else(|| Error::InvalidExample {
            id: example.id,
            reason: format!("answer {} does not occur in the text", example.answer),
        })?;
    let rename = |toks: &[String]| -> Vec<String> {
        toks.iter()
            .map(|t| map.get(t.as_str()).cloned().unwrap_or_else(|| t.clone()))
            .collect()
    };
    Ok(RawExample {
        id: example.id,
        url: example.url.clone(),
        passage: rename(&example.passage),
        question: rename(&example.question),
        answer,
        entities: example
            .entities
            .iter()
            .filter_map(|(k, v)| map.get(k.as_str()).map(|n| (n.clone(), v.clone())))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    AnswerNotInPassage,
    BlankCount(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub kept: usize,
    pub dropped: Vec<(u64, DropReason)>,
}

/// Drops examples whose answer does not occur in the passage, and questions
/// without exactly one blank.
pub fn validate_examples(dataset: Vec<RawExample>) -> (Vec<RawExample>, ValidationReport) {
    let mut report = ValidationReport::default();
    let kept: Vec<RawExample> = dataset
        .into_iter()
        .filter(|ex| {
            let blanks = ex.blank_count();
            let reason = if !ex.answer_in_passage() {
                Some(DropReason::AnswerNotInPassage)
            } else if blanks != 1 {
                Some(DropReason::BlankCount(blanks))
            } else {
                None
            };
            match reason {
                Some(r) => {
                    report.dropped.push((ex.id, r));
                    false
                }
                None => true,
            }
        })
        .collect();
    report.kept = kept.len();
    (kept, report)
}
