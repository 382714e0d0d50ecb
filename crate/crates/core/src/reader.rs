//! Reader models: embeddings, passage and question encoders, attention, and
//! an output layer over entity symbols.
//!
//! Six variants are available through [`ModelVariant`]: the Stanford Reader
//! with one or two encoder layers and dot-product or bilinear attention, and
//! the Sequential Attention reader with elementwise or partial-bilinear
//! scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{Attended, Attention, AttentionTrace, ScoringVariant};
use crate::data::{uniform_table, Batch};
use crate::encoder::{EmbeddingTable, EncoderStack};
use crate::error::{Error, Result};
use crate::params::{Bound, Param, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    SrDot,
    SrBilinear,
    Sr2Dot,
    Sr2Bilinear,
    SaElementwise,
    SaPartialBilinear,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::SrDot,
        ModelVariant::SrBilinear,
        ModelVariant::Sr2Dot,
        ModelVariant::Sr2Bilinear,
        ModelVariant::SaElementwise,
        ModelVariant::SaPartialBilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::SrDot => "sr-dot",
            ModelVariant::SrBilinear => "sr-bilinear",
            ModelVariant::Sr2Dot => "sr2-dot",
            ModelVariant::Sr2Bilinear => "sr2-bilinear",
            ModelVariant::SaElementwise => "sa-elementwise",
            ModelVariant::SaPartialBilinear => "sa-partial-bilinear",
        }
    }

    pub fn scoring(self) -> ScoringVariant {
        match self {
            ModelVariant::SrDot | ModelVariant::Sr2Dot => ScoringVariant::DotProduct,
            ModelVariant::SrBilinear | ModelVariant::Sr2Bilinear => ScoringVariant::Bilinear,
            ModelVariant::SaElementwise => ScoringVariant::ElementwiseSa,
            ModelVariant::SaPartialBilinear => ScoringVariant::PartialBilinearSa,
        }
    }

    pub fn layers(self) -> usize {
        match self {
            ModelVariant::Sr2Dot | ModelVariant::Sr2Bilinear => 2,
            _ => 1,
        }
    }

    pub fn is_sequential(self) -> bool {
        self.scoring().is_sequential()
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

fn default_true() -> bool {
    true
}

fn default_embed_bound() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub scoring: ScoringVariant,
    pub layers: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Per-direction hidden size of the attention RNN.
    pub attn_hidden: usize,
    /// Columns of the output matrix; entity ids must be below this.
    pub max_entities: usize,
    pub dropout: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub train_embeddings: bool,
    /// Embeddings start from uniform(−b, b) when no table is supplied.
    #[serde(default = "default_embed_bound")]
    pub embed_bound: f64,
}

impl ReaderConfig {
    /// Full-size configuration: 50k vocabulary, 100-dimensional embeddings,
    /// 128 hidden units and 340 entity columns.
    pub fn paper(variant: ModelVariant) -> Self {
        ReaderConfig {
            scoring: variant.scoring(),
            layers: variant.layers(),
            vocab_size: 50_000,
            embed_dim: 100,
            hidden: 128,
            attn_hidden: 128,
            max_entities: 340,
            dropout: 0.2,
            seed: 1,
            train_embeddings: true,
            embed_bound: default_embed_bound(),
        }
    }

    /// Small configuration for synthetic tasks and tests.
    pub fn small(variant: ModelVariant, vocab_size: usize, max_entities: usize) -> Self {
        ReaderConfig {
            vocab_size,
            embed_dim: 32,
            hidden: 32,
            attn_hidden: 32,
            max_entities,
            ..Self::paper(variant)
        }
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        self.scoring = variant.scoring();
        self.layers = variant.layers();
        self
    }

    /// The named variant this configuration corresponds to, if any.
    pub fn variant(&self) -> Option<ModelVariant> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.scoring() == self.scoring && v.layers() == self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config(format!("layer count must be 1 or 2, got {}", self.layers)));
        }
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("attn_hidden", self.attn_hidden),
            ("max_entities", self.max_entities),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.embed_bound > 0.0 && self.embed_bound.is_finite()) {
            return Err(Error::Config(format!("embedding bound {} must be positive", self.embed_bound)));
        }
        Ok(())
    }
}

/// Trainable parameter totals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

/// Output of [`ReaderModel::predict`] for one example.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: u64,
    pub entity: usize,
    /// `(entity, log-probability)` over the candidates.
    pub log_probs: Vec<(usize, f64)>,
    pub trace: AttentionTrace,
}

/// Everything one forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[B×E]` unmasked entity logits.
    pub logits: Var,
    /// Flattened `[B×E]` candidate mask.
    pub candidate_mask: Vec<bool>,
    pub attended: Attended,
    pub passage_states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ReaderModel {
    pub config: ReaderConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub passage: EncoderStack,
    pub question: EncoderStack,
    pub attention: Attention,
    /// `[2h×E]`
    pub output: ParamId,
}

/// Anything that picks one entity per batch row.
pub trait Predictor: Sync {
    fn predict_entities(&self, batch: &Batch) -> Result<Vec<usize>>;
}

impl ReaderModel {
    /// Builds a model. Embeddings come from `embeddings` when given (shape
    /// `[vocab_size×embed_dim]`), otherwise from uniform(−b, b) with
    /// `b = config.embed_bound`.
    /// Encoder GRU weights are drawn from a normal with standard deviation
    /// 0.1; attention and output weights from uniform(−0.01, 0.01); biases
    /// start at zero.
    pub fn build(config: ReaderConfig, embeddings: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden);
        let table = match embeddings {
            Some(t) if t.shape() == [v, d] => t,
            Some(t) => return Err(Error::shape("embeddings", t.shape(), &[v, d])),
            None => uniform_table(v, d, config.embed_bound, &mut rng),
        };

        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::register(&mut store, table)?;
        if !config.train_embeddings {
            store.get_mut(embedding.table).trainable = false;
        }
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut gru_init = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
        };
        let passage = EncoderStack::register(
            &mut store,
            "passage",
            ParamGroup::PassageEncoder,
            d,
            h,
            config.layers,
            &mut gru_init,
        )?;
        let question = EncoderStack::register(
            &mut store,
            "question",
            ParamGroup::QuestionEncoder,
            d,
            h,
            config.layers,
            &mut gru_init,
        )?;
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-0.01..0.01)).collect()).expect("sized")
        };
        let attention = Attention::register(&mut store, config.scoring, 2 * h, config.attn_hidden, &mut uniform);
        let output = store.add("output.m", ParamGroup::Output, uniform(&[2 * h, config.max_entities]));
        Ok(ReaderModel {
            config,
            store,
            embedding,
            passage,
            question,
            attention,
            output,
        })
    }

    pub fn variant(&self) -> Option<ModelVariant> {
        self.config.variant()
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut by_group: BTreeMap<ParamGroup, usize> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for (_, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            *by_group.entry(p.group).or_default() += p.value.numel();
        }
        ParamCount {
            total: by_group.values().sum(),
            by_group,
        }
    }

    fn candidate_mask(&self, batch: &Batch) -> Result<Vec<bool>> {
        let e = self.config.max_entities;
        let mut mask = vec![false; batch.len() * e];
        for (b, cands) in batch.candidates.iter().enumerate() {
            if cands.is_empty() {
                return Err(Error::InvalidExample {
                    id: batch.ids[b],
                    reason: "no candidate entities".into(),
                });
            }
            for &c in cands {
                if c >= e {
                    return Err(Error::InvalidExample {
                        id: batch.ids[b],
                        reason: format!("entity {c} exceeds the {e} output columns"),
                    });
                }
                mask[b * e + c] = true;
            }
        }
        Ok(mask)
    }

    /// Runs the model over `batch` with parameters bound as `p`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let candidate_mask = self.candidate_mask(batch)?;
        let rate = self.config.dropout;
        let q_emb = self.embedding.lookup(tape, p, &batch.question)?;
        let q = self.question.encode(tape, p, &q_emb, &batch.question_mask, rate, mode, rng)?;
        let j = q.endpoints(tape)?;
        let p_emb = self.embedding.lookup(tape, p, &batch.passage)?;
        let hs = self.passage.encode(tape, p, &p_emb, &batch.passage_mask, rate, mode, rng)?.states;
        let attended = self.attention.attend(tape, p, j, &hs, &batch.passage_mask, rate, mode, rng)?;
        let logits = tape.matmul(attended.context, p[self.output])?;
        Ok(ForwardPass {
            logits,
            candidate_mask,
            attended,
            passage_states: hs,
        })
    }

    /// Mean negative log-likelihood of the answers, normalized over each
    /// example's candidates.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, ForwardPass)> {
        for (b, (&a, cands)) in batch.answers.iter().zip(&batch.candidates).enumerate() {
            if !cands.contains(&a) {
                return Err(Error::InvalidExample {
                    id: batch.ids[b],
                    reason: format!("answer {a} is not a candidate"),
                });
            }
        }
        let fwd = self.forward(tape, p, batch, mode, rng)?;
        let loss = tape.nll_loss(fwd.logits, &fwd.candidate_mask, &batch.answers)?;
        Ok((loss, fwd))
    }

    /// Evaluation-mode predictions with attention traces.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, &p, batch, Mode::Eval, &mut rng)?;
        let logits = tape.value(fwd.logits);
        Ok(batch
            .candidates
            .iter()
            .enumerate()
            .map(|(b, cands)| {
                let row = logits.row(b);
                let (entity, log_probs) = candidate_log_probs(row, cands);
                Prediction {
                    id: batch.ids[b],
                    entity,
                    log_probs,
                    trace: fwd.attended.trace(&tape, b, batch.passage_lens[b]),
                }
            })
            .collect())
    }

    pub fn save(&self, path: &Path, vocab_hash: Option<&str>) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab_hash: vocab_hash.map(String::from),
            params: self.store.iter().map(|(_, p)| p.clone()).collect(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`ReaderModel::save`], returning the
    /// model and the stored vocabulary hash.
    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = ReaderModel::build(ckpt.config, None)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for saved in ckpt.params {
            let id = model
                .store
                .find(&saved.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {}", saved.name)))?;
            let slot = model.store.get_mut(id);
            if slot.value.shape() != saved.value.shape() || slot.group != saved.group {
                return Err(Error::shape("checkpoint", saved.value.shape(), slot.value.shape()));
            }
            *slot = saved;
        }
        Ok((model, ckpt.vocab_hash))
    }
}

impl Predictor for ReaderModel {
    fn predict_entities(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.predict(batch)?.into_iter().map(|p| p.entity).collect())
    }
}

/// Highest-scoring candidate (lowest id on ties) and log-probabilities
/// normalized over the candidates.
pub fn candidate_log_probs(logits: &[f64], candidates: &[usize]) -> (usize, Vec<(usize, f64)>) {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = sorted[0];
    for &c in &sorted[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    let max = logits[best];
    let lse = max + sorted.iter().map(|&c| (logits[c] - max).exp()).sum::<f64>().ln();
    (best, sorted.iter().map(|&c| (c, logits[c] - lse)).collect())
}

const CHECKPOINT_FORMAT: &str = "seqattn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ReaderConfig,
    vocab_hash: Option<String>,
    params: Vec<Param>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClozeExample;
    use crate::tensor::grad_check;

    fn tiny(variant: ModelVariant) -> ReaderConfig {
        ReaderConfig {
            vocab_size: 12,
            embed_dim: 4,
            hidden: 3,
            attn_hidden: 3,
            max_entities: 3,
            dropout: 0.0,
            seed: 7,
            ..ReaderConfig::paper(variant)
        }
    }

    fn example(id: u64, passage: &[usize], question: &[usize], answer: usize) -> ClozeExample {
        let mut candidates: Vec<usize> = passage.iter().filter(|&&t| (3..6).contains(&t)).map(|t| t - 3).collect();
        candidates.sort_unstable();
        candidates.dedup();
        ClozeExample {
            id,
            passage: passage.to_vec(),
            question: question.to_vec(),
            answer,
            candidates,
        }
    }

    fn examples() -> Vec<ClozeExample> {
        vec![
            example(0, &[3, 7, 4, 8, 5], &[2, 7, 9], 1),
            example(1, &[9, 4, 10], &[11, 2], 1),
            example(2, &[5, 6, 3, 3, 7, 11, 8], &[8, 2, 6, 10], 0),
        ]
    }

    fn zeroed(mut m: ReaderModel) -> ReaderModel {
        for p in m.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    fn logits(m: &ReaderModel, batch: &Batch) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = m.forward(&mut tape, &p, batch, Mode::Eval, &mut rng).unwrap();
        tape.value(fwd.logits).data().to_vec()
    }

    #[test]
    fn variants_parse_and_map() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
            assert_eq!(ReaderConfig::paper(v).variant(), Some(v));
        }
        assert!("sr-cosine".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = tiny(ModelVariant::SrDot);
        assert!(ok.validate().is_ok());
        assert!(ReaderConfig { layers: 3, ..ok.clone() }.validate().is_err());
        assert!(ReaderConfig { hidden: 0, ..ok.clone() }.validate().is_err());
        assert!(ReaderConfig { dropout: 1.0, ..ok.clone() }.validate().is_err());
        let table = Tensor::zeros(&[5, 4]);
        assert!(ReaderModel::build(ok, Some(table)).is_err());
    }

    #[test]
    fn build_is_deterministic_and_ranges_hold() {
        for v in ModelVariant::ALL {
            let a = ReaderModel::build(tiny(v), None).unwrap();
            let b = ReaderModel::build(tiny(v), None).unwrap();
            assert_eq!(a.store, b.store);
            for (_, p) in a.store.iter() {
                let uniform = matches!(p.group, ParamGroup::Attention | ParamGroup::Output | ParamGroup::Embeddings);
                if uniform {
                    assert!(p.value.data().iter().all(|x| x.abs() <= 0.01), "{}", p.name);
                }
                if p.name.contains(".b_") {
                    assert!(p.value.data().iter().all(|&x| x == 0.0));
                }
            }
        }
        let other = ReaderModel::build(ReaderConfig { seed: 8, ..tiny(ModelVariant::SrDot) }, None).unwrap();
        assert_ne!(other.store, ReaderModel::build(tiny(ModelVariant::SrDot), None).unwrap().store);
    }

    #[test]
    fn gru_init_moments() {
        let cfg = ReaderConfig {
            vocab_size: 10,
            embed_dim: 40,
            hidden: 40,
            ..tiny(ModelVariant::SrDot)
        };
        let m = ReaderModel::build(cfg, None).unwrap();
        let sample: Vec<f64> = m
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::PassageEncoder && !p.name.contains(".b_"))
            .flat_map(|(_, p)| p.value.data().to_vec())
            .collect();
        assert!(sample.len() >= 10_000);
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let std = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 0.005, "{mean}");
        assert!((0.095..=0.105).contains(&std), "{std}");
    }

    #[test]
    fn parameter_enumeration_is_complete_and_unique() {
        let m = ReaderModel::build(tiny(ModelVariant::SaPartialBilinear), None).unwrap();
        let mut names: Vec<&str> = m.store.iter().map(|(_, p)| p.name.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), before);
        let total: usize = m.store.iter().map(|(_, p)| p.value.numel()).sum();
        assert_eq!(m.count_parameters().total, total);
    }

    #[test]
    fn counts_follow_closed_form() {
        // Independent tally: per GRU direction 3(in·h + h² + h).
        let gru = |i: usize, h: usize| 3 * (i * h + h * h + h);
        for v in ModelVariant::ALL {
            let c = tiny(v);
            let (d, h, ha, e) = (c.embed_dim, c.hidden, c.attn_hidden, c.max_entities);
            let mut enc = 2 * gru(d, h);
            if c.layers == 2 {
                enc += 2 * gru(2 * h, h);
            }
            let attn = match v.scoring() {
                ScoringVariant::DotProduct => 0,
                ScoringVariant::Bilinear => 4 * h * h,
                ScoringVariant::ElementwiseSa => 2 * gru(2 * h, ha),
                ScoringVariant::PartialBilinearSa => 4 * h * h + 2 * gru(2 * h, ha),
            };
            let m = ReaderModel::build(c.clone(), None).unwrap();
            let count = m.count_parameters();
            assert_eq!(count.by_group[&ParamGroup::PassageEncoder], enc, "{v}");
            assert_eq!(count.by_group[&ParamGroup::QuestionEncoder], enc);
            assert_eq!(count.by_group[&ParamGroup::Attention], attn);
            assert_eq!(count.by_group[&ParamGroup::Output], 2 * h * e);
            assert_eq!(count.total, c.vocab_size * d + 2 * enc + attn + 2 * h * e);
        }
        let frozen = ReaderConfig { train_embeddings: false, ..tiny(ModelVariant::SrDot) };
        let m = ReaderModel::build(frozen, None).unwrap();
        assert_eq!(m.count_parameters().by_group[&ParamGroup::Embeddings], 0);
    }

    #[test]
    fn zero_parameters_give_uniform_candidates() {
        for v in ModelVariant::ALL {
            let m = zeroed(ReaderModel::build(tiny(v), None).unwrap());
            let data = examples();
            let refs: Vec<&ClozeExample> = data.iter().collect();
            let batch = Batch::from_examples(&refs).unwrap();
            for (pred, ex) in m.predict(&batch).unwrap().iter().zip(&data) {
                let k = ex.candidates.len() as f64;
                for &(_, lp) in &pred.log_probs {
                    assert!((lp + k.ln()).abs() < 1e-12);
                }
                assert_eq!(pred.entity, ex.candidates[0]);
            }
            let mut tape = Tape::new();
            let p = m.store.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let single = Batch::from_examples(&[&data[0]]).unwrap();
            let (loss, _) = m.loss(&mut tape, &p, &single, Mode::Eval, &mut rng).unwrap();
            let k = data[0].candidates.len() as f64;
            assert!((tape.value(loss).item().unwrap() - k.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_candidate_is_forced() {
        let m = ReaderModel::build(tiny(ModelVariant::SaElementwise), None).unwrap();
        let ex = example(0, &[7, 4, 8], &[2], 1);
        let pred = &m.predict(&Batch::from_examples(&[&ex]).unwrap()).unwrap()[0];
        assert_eq!(pred.entity, 1);
        assert_eq!(pred.log_probs, vec![(1, 0.0)]);
    }

    #[test]
    fn prediction_matches_loop_oracle() {
        for v in ModelVariant::ALL {
            let m = ReaderModel::build(ReaderConfig { seed: 3, ..tiny(v) }, None).unwrap();
            let data = examples();
            let refs: Vec<&ClozeExample> = data.iter().collect();
            let batch = Batch::from_examples(&refs).unwrap();
            let preds = m.predict(&batch).unwrap();
            let mm = &m.store.get(m.output).value;
            let (rows, cols) = (mm.shape()[0], mm.shape()[1]);
            for (pred, ex) in preds.iter().zip(&data) {
                let o = &pred.trace.context;
                let mut best: Option<(usize, f64)> = None;
                for &a in &ex.candidates {
                    let mut s = 0.0;
                    for (r, or) in o.iter().enumerate().take(rows) {
                        s += mm.data()[r * cols + a] * or;
                    }
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((a, s));
                    }
                }
                assert_eq!(pred.entity, best.unwrap().0, "{v}");
                assert!(ex.candidates.contains(&pred.entity));
            }
        }
    }

    #[test]
    fn batching_and_padding_invariance() {
        for v in ModelVariant::ALL {
            let m = ReaderModel::build(ReaderConfig { seed: 5, ..tiny(v) }, None).unwrap();
            let data = examples();
            let refs: Vec<&ClozeExample> = data.iter().collect();
            let full = logits(&m, &Batch::from_examples(&refs).unwrap());
            let padded = logits(&m, &Batch::padded(&refs, 11, 9).unwrap());
            let e = m.config.max_entities;
            for (b, ex) in data.iter().enumerate() {
                let alone = logits(&m, &Batch::from_examples(&[ex]).unwrap());
                for k in 0..e {
                    assert!((alone[k] - full[b * e + k]).abs() <= 1e-10, "{v}");
                    assert!((padded[b * e + k] - full[b * e + k]).abs() <= 1e-10, "{v}");
                }
            }
            let twice = logits(&m, &Batch::from_examples(&[&data[2], &data[2]]).unwrap());
            assert_eq!(twice[..e], twice[e..]);
        }
    }

    #[test]
    fn rejects_bad_examples() {
        let m = ReaderModel::build(tiny(ModelVariant::SrDot), None).unwrap();
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wrong = example(4, &[3, 7], &[2], 1);
        let batch = Batch::from_examples(&[&wrong]).unwrap();
        assert!(matches!(
            m.loss(&mut tape, &p, &batch, Mode::Eval, &mut rng),
            Err(Error::InvalidExample { id: 4, .. })
        ));
        let mut big = example(5, &[3, 7], &[2], 0);
        big.candidates.push(9);
        let batch = Batch::from_examples(&[&big]).unwrap();
        assert!(m.predict(&batch).is_err());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for v in ModelVariant::ALL {
            let m = ReaderModel::build(ReaderConfig { seed: 11, ..tiny(v) }, None).unwrap();
            // Widen the small uniform weights so every path carries signal.
            let inputs: Vec<Tensor> = m
                .store
                .iter()
                .map(|(_, p)| {
                    let mut t = p.value.clone();
                    if matches!(p.group, ParamGroup::Attention | ParamGroup::Output | ParamGroup::Embeddings) {
                        t.data_mut().iter_mut().for_each(|x| *x *= 50.0);
                    }
                    t
                })
                .collect();
            let data = [example(0, &[3, 8, 4, 9, 5], &[2, 7, 10], 2), example(1, &[4, 6, 3], &[9, 2], 0)];
            let batch = Batch::from_examples(&[&data[0], &data[1]]).unwrap();
            let report = grad_check(
                |tape, vars| {
                    let p = Bound::from_vars(vars.to_vec());
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    Ok(m.loss(tape, &p, &batch, Mode::Eval, &mut rng)?.0)
                },
                &inputs,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{v}: {report:?}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = ReaderModel::build(tiny(ModelVariant::SaPartialBilinear), None).unwrap();
        m.save(&path, Some("abc")).unwrap();
        let (back, hash) = ReaderModel::load(&path).unwrap();
        assert_eq!(hash.as_deref(), Some("abc"));
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        std::fs::write(&path, "{\"format\":\"x\"}").unwrap();
        assert!(ReaderModel::load(&path).is_err());
    }
}
