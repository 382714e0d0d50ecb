use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial embedding rows plus how many ordinary tokens the file covered.
#[derive(Clone, Debug)]
pub struct PretrainedEmbeddings {
    pub table: Tensor,
    pub covered: usize,
    /// Ordinary (non-reserved, non-entity) vocabulary entries.
    pub eligible: usize,
}

impl PretrainedEmbeddings {
    pub fn coverage(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.covered as f64 / self.eligible as f64
        }
    }
}

/// `rows × dim` table drawn from uniform(−bound, bound).
pub fn uniform_table(rows: usize, dim: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * dim).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, dim], data).expect("shape matches data")
}

/// Reads an embedding text file (token then `dim` floats per line).
///
/// Reserved tokens and entity symbols keep their uniform rows even when the
/// file lists them.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<PretrainedEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, vocab, dim, seed).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

pub fn parse_embeddings(text: &str, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<PretrainedEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = uniform_table(vocab.len(), dim, 0.01, &mut rng);
    let mut seen = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: "<input>".into(),
                line: i + 1,
                message: format!("bad float: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: "<input>".into(),
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let Some(id) = vocab.get(token) else { continue };
        if vocab.is_reserved(id) || vocab.is_entity(id) {
            continue;
        }
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        seen[id] = true;
    }
    let eligible = (0..vocab.len()).filter(|&i| !vocab.is_reserved(i) && !vocab.is_entity(i)).count();
    Ok(PretrainedEmbeddings {
        table,
        covered: seen.iter().filter(|&&s| s).count(),
        eligible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(text: &str) -> Vocabulary {
        Vocabulary::build([text.split_whitespace()], usize::MAX)
    }

    #[test]
    fn reads_rows_from_file() {
        let v = vocab("the cat");
        let e = parse_embeddings("the 0.1 0.2\n", &v, 2, 0).unwrap();
        assert_eq!(e.table.row(v.id("the")), &[0.1, 0.2]);
        assert!(e.table.row(v.id("cat")).iter().all(|x| x.abs() <= 0.01));
        assert!(e.table.is_finite());
        assert_eq!(e.table.shape(), &[v.len(), 2]);
    }

    #[test]
    fn coverage_counts_ordinary_tokens() {
        let v = vocab("a b c d e @entity0");
        let file = "a 1 1\nc 2 2\ne 3 3\nzzz 4 4\n@entity0 5 5\n";
        let e = parse_embeddings(file, &v, 2, 0).unwrap();
        assert_eq!((e.covered, e.eligible), (3, 5));
        assert!((e.coverage() - 0.6).abs() < 1e-15);
        assert!(e.table.row(v.id("@entity0")).iter().all(|x| x.abs() <= 0.01));
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let v = vocab("a");
        let err = parse_embeddings("a 1 2\nb 1\n", &v, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
