//! Attention scoring over encoded passages.
//!
//! Four scoring functions are supported. The two pointwise ones score each
//! passage position on its own:
//!
//! * dot product, `jᵀh_i`
//! * bilinear, `jᵀW h_i`
//!
//! The two sequential ones first build a score *vector* per position,
//!
//! * partial bilinear, `γ_i = j ∘ W h_i`
//! * element-wise, `γ_i = j ∘ h_i`
//!
//! then run a bidirectional GRU over the `γ_i` and score each position by the
//! component sum of its output `η_i`. Summing `γ_i` directly would reproduce
//! the bilinear (or dot-product) logit, which is what makes the sequential
//! scorers a strict generalisation of the pointwise ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BiGruLayer, Init};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Mode, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringVariant {
    DotProduct,
    Bilinear,
    PartialBilinearSa,
    ElementwiseSa,
}

impl ScoringVariant {
    /// Whether the variant owns a `[2h×2h]` matrix `W`.
    pub fn has_matrix(self) -> bool {
        matches!(self, ScoringVariant::Bilinear | ScoringVariant::PartialBilinearSa)
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, ScoringVariant::PartialBilinearSa | ScoringVariant::ElementwiseSa)
    }
}

/// Time-major mask `[n][B]` to the batch-major flat layout `[B×n]`.
pub fn batch_major(mask: &[Vec<bool>]) -> Vec<bool> {
    let n = mask.len();
    let b = mask.first().map_or(0, Vec::len);
    let mut out = vec![false; n * b];
    for (t, step) in mask.iter().enumerate() {
        for (r, &m) in step.iter().enumerate() {
            out[r * n + t] = m;
        }
    }
    out
}

/// Per-position bilinear logits `jᵀW h_i`, each `[B×1]`.
pub fn bilinear_logits(tape: &mut Tape, j: Var, hs: &[Var], w: Var) -> Result<Vec<Var>> {
    let jw = tape.matmul(j, w)?;
    hs.iter()
        .map(|&h| {
            let p = tape.mul(jw, h)?;
            Ok(tape.sum_last_axis(p))
        })
        .collect()
}

/// Per-position dot-product logits `jᵀh_i`, each `[B×1]`.
pub fn dot_logits(tape: &mut Tape, j: Var, hs: &[Var]) -> Result<Vec<Var>> {
    hs.iter()
        .map(|&h| {
            let p = tape.mul(j, h)?;
            Ok(tape.sum_last_axis(p))
        })
        .collect()
}

/// Joins per-position `[B×1]` logits and applies the masked softmax,
/// giving `α: [B×n]`. `mask` is time-major.
pub fn normalize(tape: &mut Tape, logits: &[Var], mask: &[Vec<bool>]) -> Result<Var> {
    let scores = tape.concat_all(logits, 1)?;
    tape.masked_softmax(scores, &batch_major(mask))
}

pub fn score_bilinear(tape: &mut Tape, j: Var, hs: &[Var], w: Var, mask: &[Vec<bool>]) -> Result<Var> {
    let logits = bilinear_logits(tape, j, hs, w)?;
    normalize(tape, &logits, mask)
}

pub fn score_dot(tape: &mut Tape, j: Var, hs: &[Var], mask: &[Vec<bool>]) -> Result<Var> {
    let logits = dot_logits(tape, j, hs)?;
    normalize(tape, &logits, mask)
}

/// `γ_i = j ∘ W h_i` (partial bilinear) or `γ_i = j ∘ h_i` (element-wise).
pub fn gamma_vectors(
    tape: &mut Tape,
    variant: ScoringVariant,
    j: Var,
    hs: &[Var],
    w: Option<Var>,
) -> Result<Vec<Var>> {
    match (variant, w) {
        (ScoringVariant::PartialBilinearSa, Some(w)) => hs
            .iter()
            .map(|&h| {
                let wh = tape.matmul_nt(h, w)?;
                tape.mul(j, wh)
            })
            .collect(),
        (ScoringVariant::ElementwiseSa, None) => hs.iter().map(|&h| tape.mul(j, h)).collect(),
        (ScoringVariant::PartialBilinearSa, None) => {
            Err(Error::Config("partial-bilinear scoring needs a W matrix".into()))
        }
        (ScoringVariant::ElementwiseSa, Some(_)) => {
            Err(Error::Config("element-wise scoring takes no W matrix".into()))
        }
        (v, _) => Err(Error::Config(format!("{v:?} is not a sequential scorer"))),
    }
}

/// The bidirectional GRU that reads `γ` vectors.
#[derive(Clone, Debug)]
pub struct AttentionRnn {
    pub layer: BiGruLayer,
}

impl AttentionRnn {
    pub fn output_dim(&self) -> usize {
        2 * self.layer.hidden()
    }

    /// Raw scores `1ᵀη_i` (each `[B×1]`) and the `η_i` themselves.
    pub fn scores(
        &self,
        tape: &mut Tape,
        p: &Bound,
        gammas: &[Var],
        mask: &[Vec<bool>],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if let Some(&g) = gammas.first() {
            if tape.shape(g)[1] != self.layer.input() {
                return Err(Error::shape("sa_attention", tape.shape(g), &[self.layer.input()]));
            }
        }
        let out = self.layer.encode(tape, p, gammas, mask)?;
        let scores = out.states.iter().map(|&eta| tape.sum_last_axis(eta)).collect();
        Ok((scores, out.states))
    }
}

/// `o = Σ_i α_i h_i`.
pub fn context_vector(tape: &mut Tape, alpha: Var, hs: &[Var]) -> Result<Var> {
    tape.weighted_sum(alpha, hs)
}

/// Attention parameters for one scoring variant.
#[derive(Clone, Debug)]
pub struct Attention {
    pub variant: ScoringVariant,
    pub dim: usize,
    pub w: Option<ParamId>,
    pub rnn: Option<AttentionRnn>,
}

/// Everything an attention pass produced, still on the tape.
#[derive(Clone, Debug)]
pub struct Attended {
    /// `[B×n]` raw scores before the softmax.
    pub scores: Var,
    /// `[B×n]`
    pub alpha: Var,
    /// `[B×dim]`
    pub context: Var,
    pub gammas: Option<Vec<Var>>,
    pub etas: Option<Vec<Var>>,
}

impl Attention {
    /// `W` and the attention RNN weights come from `init`; RNN biases are zero.
    pub fn register(
        store: &mut ParamStore,
        variant: ScoringVariant,
        dim: usize,
        rnn_hidden: usize,
        init: Init<'_>,
    ) -> Self {
        let w = variant
            .has_matrix()
            .then(|| store.add("attention.w", ParamGroup::Attention, init(&[dim, dim])));
        let rnn = variant.is_sequential().then(|| AttentionRnn {
            layer: BiGruLayer::register(store, "attention.rnn", ParamGroup::Attention, dim, rnn_hidden, init),
        });
        Attention { variant, dim, w, rnn }
    }

    pub fn param_count(variant: ScoringVariant, dim: usize, rnn_hidden: usize) -> usize {
        let w = if variant.has_matrix() { dim * dim } else { 0 };
        let rnn = if variant.is_sequential() {
            BiGruLayer::param_count(dim, rnn_hidden)
        } else {
            0
        };
        w + rnn
    }

    /// Scores passage states `hs` against the question vector `j`, normalizes
    /// over unmasked positions and forms the context vector. Dropout applies
    /// to the `γ` vectors of the sequential variants.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        j: Var,
        hs: &[Var],
        mask: &[Vec<bool>],
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Attended> {
        let w = self.w.map(|id| p[id]);
        let (logits, gammas, etas) = match self.variant {
            ScoringVariant::DotProduct => (dot_logits(tape, j, hs)?, None, None),
            ScoringVariant::Bilinear => (bilinear_logits(tape, j, hs, w.expect("bilinear W"))?, None, None),
            ScoringVariant::PartialBilinearSa | ScoringVariant::ElementwiseSa => {
                let gammas = gamma_vectors(tape, self.variant, j, hs, w)?;
                let dropped = gammas
                    .iter()
                    .map(|&g| tape.dropout(g, dropout, mode, rng))
                    .collect::<Result<Vec<_>>>()?;
                let rnn = self.rnn.as_ref().expect("sequential variant has an RNN");
                let (scores, etas) = rnn.scores(tape, p, &dropped, mask)?;
                (scores, Some(gammas), Some(etas))
            }
        };
        let scores = tape.concat_all(&logits, 1)?;
        let alpha = tape.masked_softmax(scores, &batch_major(mask))?;
        let context = context_vector(tape, alpha, hs)?;
        Ok(Attended {
            scores,
            alpha,
            context,
            gammas,
            etas,
        })
    }
}

/// Attention values for one example, detached from the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Weight per unpadded passage position.
    pub alpha: Vec<f64>,
    pub context: Vec<f64>,
    pub raw_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<Vec<f64>>>,
}

impl Attended {
    /// Copies out row `row` of the batch, keeping the first `len` positions.
    pub fn trace(&self, tape: &Tape, row: usize, len: usize) -> AttentionTrace {
        let take = |v: Var| tape.value(v).row(row)[..len].to_vec();
        let per_step = |vs: &Vec<Var>| vs[..len].iter().map(|&v| tape.value(v).row(row).to_vec()).collect();
        AttentionTrace {
            alpha: take(self.alpha),
            raw_scores: take(self.scores),
            context: tape.value(self.context).row(row).to_vec(),
            gamma: self.gammas.as_ref().map(per_step),
            eta: self.etas.as_ref().map(per_step),
        }
    }
}

impl AttentionTrace {
    /// Recomputes `Σ α_i h_i` from per-position states.
    pub fn recompute_context(&self, states: &[Vec<f64>]) -> Vec<f64> {
        let dim = states.first().map_or(0, Vec::len);
        let mut o = vec![0.0; dim];
        for (a, h) in self.alpha.iter().zip(states) {
            for (x, y) in o.iter_mut().zip(h) {
                *x += a * y;
            }
        }
        o
    }
}
