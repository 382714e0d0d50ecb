use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClozeExample, PAD_ID};
use crate::error::{Error, Result};

/// Padded minibatch. Token grids and masks are time-major: `passage[t][b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub passage: Vec<Vec<usize>>,
    pub passage_mask: Vec<Vec<bool>>,
    pub passage_lens: Vec<usize>,
    pub question: Vec<Vec<usize>>,
    pub question_mask: Vec<Vec<bool>>,
    pub answers: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

fn pad(seqs: &[&[usize]], len: usize) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let tokens = (0..len)
        .map(|t| seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD_ID)).collect())
        .collect();
    let mask = (0..len).map(|t| seqs.iter().map(|s| t < s.len()).collect()).collect();
    (tokens, mask)
}

impl Batch {
    /// Pads `examples` to the longest passage and question among them.
    pub fn from_examples(examples: &[&ClozeExample]) -> Result<Batch> {
        Self::padded(examples, 0, 0)
    }

    /// Like [`Batch::from_examples`] but pads to at least the given lengths.
    pub fn padded(examples: &[&ClozeExample], min_passage: usize, min_question: usize) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        for ex in examples {
            if ex.passage.is_empty() || ex.question.is_empty() {
                return Err(Error::InvalidExample {
                    id: ex.id,
                    reason: "empty passage or question".into(),
                });
            }
            if ex.candidates.is_empty() {
                return Err(Error::InvalidExample {
                    id: ex.id,
                    reason: "no candidate entities".into(),
                });
            }
        }
        let passages: Vec<&[usize]> = examples.iter().map(|e| e.passage.as_slice()).collect();
        let questions: Vec<&[usize]> = examples.iter().map(|e| e.question.as_slice()).collect();
        let n = passages.iter().map(|s| s.len()).max().unwrap_or(0).max(min_passage);
        let m = questions.iter().map(|s| s.len()).max().unwrap_or(0).max(min_question);
        let (passage, passage_mask) = pad(&passages, n);
        let (question, question_mask) = pad(&questions, m);
        Ok(Batch {
            ids: examples.iter().map(|e| e.id).collect(),
            passage,
            passage_mask,
            passage_lens: passages.iter().map(|s| s.len()).collect(),
            question,
            question_mask,
            answers: examples.iter().map(|e| e.answer).collect(),
            candidates: examples.iter().map(|e| e.candidates.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The example order for one epoch: a permutation of `0..n` determined by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffles `dataset` for `(seed, epoch)` and cuts it into padded batches.
pub fn make_batches(dataset: &[ClozeExample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let order = epoch_order(dataset.len(), seed, epoch);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let examples: Vec<&ClozeExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            Batch::from_examples(&examples)
        })
        .collect()
}
