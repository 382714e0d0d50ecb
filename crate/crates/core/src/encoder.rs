//! Embedding lookup and bidirectional GRU encoders.
//!
//! Tensors flowing through the encoders are batch-major: one `[B×k]` tensor
//! per time step. Row vectors multiply weights from the left, so an
//! input-to-hidden matrix is stored as `[in×h]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Source of initial weight values, called once per weight matrix.
pub type Init<'a> = &'a mut dyn FnMut(&[usize]) -> Tensor;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register(store: &mut ParamStore, initial: Tensor) -> Result<Self> {
        let &[vocab_size, dim] = initial.shape() else {
            return Err(Error::shape("EmbeddingTable", initial.shape(), &[2]));
        };
        let table = store.add("embeddings", ParamGroup::Embeddings, initial);
        Ok(EmbeddingTable {
            table,
            vocab_size,
            dim,
        })
    }

    /// One `[B×d]` tensor per time step; `ids[t][b]` is the token of example
    /// `b` at step `t`.
    pub fn lookup(&self, tape: &mut Tape, p: &Bound, ids: &[Vec<usize>]) -> Result<Vec<Var>> {
        ids.iter().map(|step| tape.gather_rows(p[self.table], step)).collect()
    }
}

/// One direction of a GRU: update gate `z`, reset gate `r`, candidate state.
#[derive(Clone, Debug)]
pub struct GruDirection {
    pub input: usize,
    pub hidden: usize,
    /// Input-to-hidden `[in×h]` for z, r, candidate.
    pub w: [ParamId; 3],
    /// Hidden-to-hidden `[h×h]` for z, r, candidate.
    pub u: [ParamId; 3],
    /// Biases `[h]` for z, r, candidate.
    pub b: [ParamId; 3],
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl GruDirection {
    /// Registers weights drawn from `init`; biases start at zero.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        init: Init<'_>,
    ) -> Self {
        let w = GATES.map(|g| store.add(format!("{prefix}.w_{g}"), group, init(&[input, hidden])));
        let u = GATES.map(|g| store.add(format!("{prefix}.u_{g}"), group, init(&[hidden, hidden])));
        let b = GATES.map(|g| store.add(format!("{prefix}.b_{g}"), group, Tensor::zeros(&[hidden])));
        GruDirection { input, hidden, w, u, b }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * (input * hidden + hidden * hidden + hidden)
    }

    /// `h' = (1 − z)∘h + z∘tanh(W_h x + U_h (r∘h) + b_h)`, with
    /// `z = σ(W_z x + U_z h + b_z)` and `r = σ(W_r x + U_r h + b_r)`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, prev: Var, input: Var) -> Result<Var> {
        let (si, sh) = (tape.shape(input), tape.shape(prev));
        if si.len() != 2 || sh.len() != 2 || si[1] != self.input || sh[1] != self.hidden || si[0] != sh[0] {
            return Err(Error::shape("gru_step", si, sh));
        }
        let gate = |tape: &mut Tape, g: usize, h: Var| -> Result<Var> {
            let xw = tape.matmul(input, p[self.w[g]])?;
            let hu = tape.matmul(h, p[self.u[g]])?;
            let s = tape.add(xw, hu)?;
            tape.add_bias(s, p[self.b[g]])
        };
        let z = gate(tape, 0, prev)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, 1, prev)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, prev)?;
        let cand = gate(tape, 2, rh)?;
        let cand = tape.tanh(cand);
        let neg = tape.scale(z, -1.0);
        let keep = tape.shift(neg, 1.0);
        let old = tape.mul(keep, prev)?;
        let new = tape.mul(z, cand)?;
        tape.add(old, new)
    }
}

#[derive(Clone, Debug)]
pub struct BiGruLayer {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

/// Per-step outputs of a bidirectional pass.
#[derive(Clone, Debug)]
pub struct BiOutput {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    /// `concat(forward[i], backward[i])`, `[B×2h]` per step.
    pub states: Vec<Var>,
}

impl BiOutput {
    /// `concat(last forward state, first backward state)`.
    pub fn endpoints(&self, tape: &mut Tape) -> Result<Var> {
        let (Some(&f), Some(&b)) = (self.forward.last(), self.backward.first()) else {
            return Err(Error::DegenerateInput {
                op: "encode_question",
                reason: "empty sequence".into(),
            });
        };
        tape.concat(f, b, 1)
    }
}

impl BiGruLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        init: Init<'_>,
    ) -> Self {
        BiGruLayer {
            forward: GruDirection::register(store, &format!("{prefix}.fwd"), group, input, hidden, init),
            backward: GruDirection::register(store, &format!("{prefix}.bwd"), group, input, hidden, init),
        }
    }

    pub fn input(&self) -> usize {
        self.forward.input
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        2 * GruDirection::param_count(input, hidden)
    }

    /// Runs both directions from zero initial states. `mask[t][b]` is false
    /// at padding, where the previous state is carried through unchanged.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, inputs: &[Var], mask: &[Vec<bool>]) -> Result<BiOutput> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::DegenerateInput {
                op: "bigru_encode",
                reason: "empty sequence".into(),
            });
        }
        if mask.len() != n {
            return Err(Error::shape("bigru_encode", &[n], &[mask.len()]));
        }
        let batch = tape.shape(inputs[0])[0];
        let run = |tape: &mut Tape, dir: &GruDirection, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
            let mut out = vec![None; n];
            let mut h = tape.constant(Tensor::zeros(&[batch, dir.hidden]));
            for t in order {
                let next = dir.step(tape, p, h, inputs[t])?;
                h = if mask[t].iter().all(|&m| m) {
                    next
                } else {
                    tape.select_rows(&mask[t], next, h)?
                };
                out[t] = Some(h);
            }
            Ok(out)
        };
        let forward: Vec<Var> = run(tape, &self.forward, &mut (0..n))?.into_iter().flatten().collect();
        let backward: Vec<Var> = run(tape, &self.backward, &mut (0..n).rev())?.into_iter().flatten().collect();
        let states = forward
            .iter()
            .zip(&backward)
            .map(|(&f, &b)| tape.concat(f, b, 1))
            .collect::<Result<_>>()?;
        Ok(BiOutput {
            forward,
            backward,
            states,
        })
    }
}

/// A stack of bidirectional layers, each consuming the previous layer's
/// concatenated states.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<BiGruLayer>,
}

impl EncoderStack {
    pub fn new(layers: Vec<BiGruLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("encoder stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].input() != 2 * pair[0].hidden() {
                return Err(Error::Config(format!(
                    "layer input {} does not match 2 x previous hidden {}",
                    pair[1].input(),
                    pair[0].hidden()
                )));
            }
        }
        Ok(EncoderStack { layers })
    }

    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        depth: usize,
        init: Init<'_>,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| {
                let fan_in = if k == 0 { input } else { 2 * hidden };
                BiGruLayer::register(store, &format!("{prefix}.l{k}"), group, fan_in, hidden, init)
            })
            .collect();
        EncoderStack::new(layers)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers.last().expect("nonempty").hidden()
    }

    /// Applies the layers in order with dropout on every layer's input and
    /// returns the top layer's output.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[Var],
        mask: &[Vec<bool>],
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<BiOutput> {
        let mut current = inputs.to_vec();
        let mut out = None;
        for layer in &self.layers {
            let dropped = current
                .iter()
                .map(|&x| tape.dropout(x, dropout, mode, rng))
                .collect::<Result<Vec<_>>>()?;
            let o = layer.encode(tape, p, &dropped, mask)?;
            current = o.states.clone();
            out = Some(o);
        }
        Ok(out.expect("nonempty stack"))
    }
}
