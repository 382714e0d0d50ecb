use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{entity_symbol, relabel_entities, RawExample, BLANK};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticRule {
    /// Each entity follows its own marker token `mK`; the question repeats one
    /// marker right before the blank.
    PositionalEasy,
    /// The answer follows the bigram `ta tb`. Other entities follow `ta tc`
    /// or `td tb`. The question contains `ta` and `tb` with fillers between.
    ContextTrigger,
}

/// Parameters of a generated cloze task. Fillers are `w0..`, markers `m0..`
/// (twice as many as entities) and triggers `t0..` (three more than
/// entities).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub rule: SyntheticRule,
    pub entities: usize,
    /// Inclusive passage length range.
    pub passage_len: (usize, usize),
    pub fillers: usize,
    /// Chance that a filler slot holds an extra mention of some entity.
    pub mention_rate: f64,
    pub examples: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Four entities, 30 fillers and extra mentions in 30% of filler slots.
    /// Passages hold 10 to 14 tokens for the positional rule and 16 to 24
    /// for the trigger rule.
    pub fn new(rule: SyntheticRule, examples: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            rule,
            entities: 4,
            passage_len: match rule {
                SyntheticRule::PositionalEasy => (10, 14),
                SyntheticRule::ContextTrigger => (16, 24),
            },
            fillers: 30,
            mention_rate: 0.3,
            examples,
            seed,
        }
    }

    fn unit_len(&self) -> usize {
        match self.rule {
            SyntheticRule::PositionalEasy => 2,
            SyntheticRule::ContextTrigger => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.passage_len;
        let need = self.entities * self.unit_len();
        if self.entities == 0 {
            return Err(Error::Config("synthetic task needs at least one entity".into()));
        }
        if self.fillers == 0 {
            return Err(Error::Config("synthetic task needs filler tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.mention_rate) {
            return Err(Error::Config(format!("mention rate {} outside [0, 1]", self.mention_rate)));
        }
        if lo > hi {
            return Err(Error::Config(format!("passage length range {lo}..={hi} is empty")));
        }
        if lo < need {
            return Err(Error::Config(format!(
                "passages of length {lo} cannot hold {} entities ({need} tokens needed)",
                self.entities
            )));
        }
        Ok(())
    }
}

fn filler(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec) -> String {
    format!("w{}", rng.random_range(0..spec.fillers))
}

fn one_example(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec, id: u64) -> Result<RawExample> {
    let k = spec.entities;
    let mut labels: Vec<usize> = (0..4 * k).collect();
    labels.shuffle(rng);
    let ents: Vec<String> = labels[..k].iter().map(|&l| entity_symbol(l)).collect();
    let answer_idx = rng.random_range(0..k);

    let mut units: Vec<Vec<String>> = Vec::new();
    let mut question: Vec<String>;
    match spec.rule {
        SyntheticRule::PositionalEasy => {
            let mut markers: Vec<usize> = (0..2 * k).collect();
            markers.shuffle(rng);
            for (e, m) in ents.iter().zip(&markers) {
                units.push(vec![format!("m{m}"), e.clone()]);
            }
            question = vec![format!("m{}", markers[answer_idx]), BLANK.to_string()];
        }
        SyntheticRule::ContextTrigger => {
            let mut triggers: Vec<usize> = (0..k + 3).collect();
            triggers.shuffle(rng);
            let (a, b) = (triggers[0], triggers[1]);
            let others = &triggers[2..];
            let mut flip = rng.random_bool(0.5);
            for (i, e) in ents.iter().enumerate() {
                let (x, y) = if i == answer_idx {
                    (a, b)
                } else {
                    flip = !flip;
                    let o = *others.choose(rng).expect("at least three triggers");
                    if flip {
                        (a, o)
                    } else {
                        (o, b)
                    }
                };
                units.push(vec![format!("t{x}"), format!("t{y}"), e.clone()]);
            }
            question = vec![format!("t{a}")];
            for _ in 0..rng.random_range(1..=2) {
                question.push(filler(rng, spec));
            }
            question.push(format!("t{b}"));
            question.push(BLANK.to_string());
        }
    }

    let len = rng.random_range(spec.passage_len.0..=spec.passage_len.1);
    let used: usize = units.iter().map(Vec::len).sum();
    for _ in used..len {
        let tok = if rng.random_bool(spec.mention_rate) {
            ents.choose(rng).expect("k >= 1").clone()
        } else {
            filler(rng, spec)
        };
        units.push(vec![tok]);
    }
    units.shuffle(rng);

    let raw = RawExample {
        id,
        passage: units.concat(),
        question,
        answer: ents[answer_idx].clone(),
        ..Default::default()
    };
    relabel_entities(&raw)
}

/// Generates `spec.examples` answerable, relabeled examples; deterministic in
/// `spec.seed`.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<Vec<RawExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.examples as u64).map(|id| one_example(&mut rng, spec, id)).collect()
}

fn is_kind(tok: &str, prefix: char) -> bool {
    let mut chars = tok.chars();
    chars.next() == Some(prefix) && {
        let rest = chars.as_str();
        !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())
    }
}

/// Rule-based solver that reads the answer off the passage.
pub fn solve(rule: SyntheticRule, example: &RawExample) -> Option<String> {
    let p = &example.passage;
    match rule {
        SyntheticRule::PositionalEasy => {
            let marker = example.question.iter().find(|t| is_kind(t, 'm'))?;
            let at = p.iter().position(|t| t == marker)?;
            p.get(at + 1).cloned()
        }
        SyntheticRule::ContextTrigger => {
            let mut trig = example.question.iter().filter(|t| is_kind(t, 't'));
            let (a, b) = (trig.next()?, trig.next()?);
            let at = p.windows(2).position(|w| &w[0] == a && &w[1] == b)?;
            p.get(at + 2).cloned()
        }
    }
}
