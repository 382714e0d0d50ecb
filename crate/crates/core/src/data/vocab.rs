use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{entity_number, ClozeExample, RawExample, BLANK};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BLANK_ID: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", BLANK];

/// Token to id table with frequency counts.
///
/// Layout: the reserved tokens `<pad>`, `<unk>` and `@blank` at ids 0..3,
/// then every entity symbol seen in the corpus by entity number, then the
/// most frequent ordinary tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    entity: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary of at most `limit` ids. Reserved tokens and entity
    /// symbols are always included, even when that exceeds the limit; the
    /// remaining slots go to ordinary tokens by descending count, ties broken
    /// lexicographically.
    pub fn build<'a, I, S>(sequences: I, limit: usize) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok).or_default() += 1;
            }
        }
        Self::from_counts(counts, limit)
    }

    /// Counts over passages and questions of every example.
    pub fn from_examples(examples: &[RawExample], limit: usize) -> Vocabulary {
        Self::build(
            examples.iter().map(|e| {
                e.passage
                    .iter()
                    .chain(&e.question)
                    .map(String::as_str)
            }),
            limit,
        )
    }

    fn from_counts(counts: HashMap<&str, u64>, limit: usize) -> Vocabulary {
        let mut entities: Vec<(usize, &str, u64)> = Vec::new();
        let mut ordinary: Vec<(&str, u64)> = Vec::new();
        for (&tok, &c) in &counts {
            if RESERVED.contains(&tok) {
                continue;
            }
            match entity_number(tok) {
                Some(n) => entities.push((n, tok, c)),
                None => ordinary.push((tok, c)),
            }
        }
        entities.sort_unstable();
        ordinary.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            entity: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED {
            vocab.push(tok, counts.get(tok).copied().unwrap_or(0));
        }
        for (_, tok, c) in entities {
            vocab.push(tok, c);
        }
        let room = limit.saturating_sub(vocab.len());
        for (tok, c) in ordinary.into_iter().take(room) {
            vocab.push(tok, c);
        }
        vocab
    }

    fn push(&mut self, tok: &str, count: u64) {
        self.index.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
        self.counts.push(count);
        self.entity.push(entity_number(tok).is_some());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn is_entity(&self, id: usize) -> bool {
        self.entity[id]
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Largest entity number present, plus one.
    pub fn entity_span(&self) -> usize {
        self.tokens
            .iter()
            .filter_map(|t| entity_number(t))
            .max()
            .map_or(0, |n| n + 1)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps a relabeled, validated example to ids.
    pub fn encode(&self, example: &RawExample) -> Result<ClozeExample> {
        let answer = entity_number(&example.answer).ok_or_else(|| Error::InvalidExample {
            id: example.id,
            reason: format!("answer {} is not an entity symbol", example.answer),
        })?;
        let mut candidates: Vec<usize> = example.passage.iter().filter_map(|t| entity_number(t)).collect();
        candidates.sort_unstable();
        candidates.dedup();
        let ex = ClozeExample {
            id: example.id,
            passage: self.encode_tokens(&example.passage),
            question: self.encode_tokens(&example.question),
            answer,
            candidates,
        };
        ex.check()?;
        Ok(ex)
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One `token<TAB>count` line per id.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.counts)
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Vocabulary> {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            entity: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: "<vocabulary>".into(),
                line: i + 1,
                message,
            };
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| err("expected token<TAB>count".into()))?;
            let count = count.parse().map_err(|e| err(format!("bad count: {e}")))?;
            if vocab.index.contains_key(tok) {
                return Err(err(format!("duplicate token {tok}")));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(err(format!("expected reserved token {}", RESERVED[i])));
            }
            vocab.push(tok, count);
        }
        if vocab.len() < RESERVED.len() {
            return Err(Error::Parse {
                path: "<vocabulary>".into(),
                line: vocab.len() + 1,
                message: "missing reserved tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }
}
