//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and a record of
//! how to push an output gradient back to its inputs. Nodes are only ever
//! appended, so the node order is a topological order and [`Tape::backward`]
//! is a single reverse sweep.

use rand::Rng;

use super::dense::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// Dropout behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddBias(Var, Var),
    Activation(Activation, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SumAll(Var),
    SumLast(Var),
    MaskedSoftmax { input: Var, mask: Vec<bool> },
    Nll { logits: Var, probs: Vec<f64>, mask: Vec<bool>, targets: Vec<usize> },
    MulConst(Var, Vec<f64>),
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { keep: Vec<bool>, on: Var, off: Var },
    WeightedSum { weights: Var, seq: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records tensor operations and replays them backwards.
///
/// One tape per forward pass: build, call [`Tape::backward`], read gradients
/// with [`Tape::grad`], then [`Tape::clear`] or drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` before any backward pass or
    /// for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMulNt(a, b)))
    }

    /// Pointwise binary operation. Operands must have equal shapes, except
    /// that a rank-0 scalar combines with a tensor of any shape.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.rank() == 0 {
            let y = tb.data()[0];
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.rank() == 0 {
            let x = ta.data()[0];
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::shape("elementwise", ta.shape(), tb.shape()));
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Shift(a))
    }

    /// Adds a bias vector of length `n` to every row of `a: [m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let n = self.value(bias).numel();
        if sa.len() != 2 || sa[1] != n || sb.iter().filter(|&&d| d != 1).count() > 1 {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(value, rg, Op::AddBias(a, bias)))
    }

    pub fn activation(&mut self, act: Activation, a: Var) -> Var {
        let f = match act {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Activation(act, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(Activation::Tanh, a)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.concat_all(&[a, b], axis)
    }

    /// Joins tensors of equal rank along `axis`; all other dimensions must agree.
    pub fn concat_all(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Sum of every component, as a rank-0 scalar.
    pub fn sum_components(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let rows = t.outer_len();
        let data: Vec<f64> = (0..rows)
            .map(|r| t.row(r).iter().fold(0.0, |acc, x| acc + x))
            .collect();
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(d) => *d = 1,
            None => shape.push(1),
        }
        let value = Tensor::new(shape, data).expect("one value per row");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::SumLast(a))
    }

    /// Softmax over the last axis restricted to `mask`; masked entries are
    /// exactly zero. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if mask.len() != t.numel() {
            return Err(Error::shape("masked_softmax", t.shape(), &[mask.len()]));
        }
        let k = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for r in 0..t.outer_len() {
            let m = &mask[r * k..(r + 1) * k];
            softmax_row(t.row(r), m, &mut out[r * k..(r + 1) * k]).ok_or_else(|| {
                Error::DegenerateInput {
                    op: "masked_softmax",
                    reason: format!("row {r} has no unmasked position"),
                }
            })?;
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            rg,
            Op::MaskedSoftmax {
                input: logits,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`, the softmax taken over
    /// unmasked entries of the last axis. One target per row.
    pub fn nll_loss(&mut self, logits: Var, mask: &[bool], targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, k) = (t.outer_len(), t.last_dim());
        if mask.len() != t.numel() || targets.len() != rows {
            return Err(Error::shape("nll_loss", t.shape(), &[mask.len(), targets.len()]));
        }
        let mut probs = vec![0.0; t.numel()];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let m = &mask[r * k..(r + 1) * k];
            if target >= k {
                return Err(Error::InvalidTarget {
                    row: r,
                    target,
                    reason: "out of range",
                });
            }
            if !m[target] {
                return Err(Error::InvalidTarget {
                    row: r,
                    target,
                    reason: "masked",
                });
            }
            let row = t.row(r);
            let lse = softmax_row(row, m, &mut probs[r * k..(r + 1) * k]).expect("target unmasked");
            total += lse - row[target];
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            rg,
            Op::Nll {
                logits,
                probs,
                mask: mask.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Pointwise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.numel() {
            return Err(Error::shape("mul_const", t.shape(), &[factors.len()]));
        }
        let data = t.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::MulConst(a, factors)))
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `a` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let factors = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, factors)
    }

    /// Rows of `table: [V×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[2]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("gather_rows", t.shape(), &[id]));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            value,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise choice: row `r` comes from `on` where `keep[r]`, else from `off`.
    pub fn select_rows(&mut self, keep: &[bool], on: Var, off: Var) -> Result<Var> {
        let (a, b) = (self.value(on), self.value(off));
        if a.shape() != b.shape() || a.outer_len() != keep.len() {
            return Err(Error::shape("select_rows", a.shape(), b.shape()));
        }
        let mut data = Vec::with_capacity(a.numel());
        for (r, &k) in keep.iter().enumerate() {
            data.extend_from_slice(if k { a.row(r) } else { b.row(r) });
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.any_grad(&[on, off]);
        Ok(self.push(
            value,
            rg,
            Op::SelectRows {
                keep: keep.to_vec(),
                on,
                off,
            },
        ))
    }

    /// `out[r] = Σ_i weights[r, i] · seq[i][r]` for `weights: [B×n]` and
    /// `n` tensors of shape `[B×k]`.
    pub fn weighted_sum(&mut self, weights: Var, seq: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        let first = *seq
            .first()
            .ok_or_else(|| Error::Contract("weighted_sum over empty sequence".into()))?;
        let shape = self.shape(first).to_vec();
        if w.rank() != 2 || w.shape()[1] != seq.len() || shape.len() != 2 || shape[0] != w.shape()[0]
        {
            return Err(Error::shape("weighted_sum", w.shape(), &shape));
        }
        let (b, k, n) = (shape[0], shape[1], seq.len());
        let mut out = vec![0.0; b * k];
        for (i, &h) in seq.iter().enumerate() {
            let ht = self.value(h);
            if ht.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, ht.shape()));
            }
            for r in 0..b {
                let a = w.data()[r * n + i];
                for (o, x) in out[r * k..(r + 1) * k].iter_mut().zip(ht.row(r)) {
                    *o += a * x;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let mut all = seq.to_vec();
        all.push(weights);
        let rg = self.any_grad(&all);
        Ok(self.push(
            value,
            rg,
            Op::WeightedSum {
                weights,
                seq: seq.to_vec(),
            },
        ))
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Gradients accumulate over fan-out; nodes unreachable from `loss`
    /// get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &|ga| add_into(ga, &gemm_nt(gd, tb.data(), m, n, k)));
                acc(*b, &|gb| add_into(gb, &gemm_tn(ta.data(), gd, m, k, n)));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                acc(*a, &|ga| add_into(ga, &gemm(gd, tb.data(), m, n, k)));
                acc(*b, &|gb| add_into(gb, &gemm_tn(gd, ta.data(), m, n, k)));
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.rank() == 0 && tb.rank() != 0, tb.rank() == 0 && ta.rank() != 0);
                // d/da and d/db of the pointwise op, given the paired operand values
                let da = |_x: f64, y: f64| match op {
                    BinaryOp::Add | BinaryOp::Sub => 1.0,
                    BinaryOp::Mul => y,
                };
                let db = |x: f64, _y: f64| match op {
                    BinaryOp::Add => 1.0,
                    BinaryOp::Sub => -1.0,
                    BinaryOp::Mul => x,
                };
                let pair = |j: usize| {
                    let x = if sa { ta.data()[0] } else { ta.data()[j] };
                    let y = if sb { tb.data()[0] } else { tb.data()[j] };
                    (x, y)
                };
                acc(*a, &|ga| {
                    for (j, gj) in gd.iter().enumerate() {
                        let (x, y) = pair(j);
                        ga[if sa { 0 } else { j }] += gj * da(x, y);
                    }
                });
                acc(*b, &|gb| {
                    for (j, gj) in gd.iter().enumerate() {
                        let (x, y) = pair(j);
                        gb[if sb { 0 } else { j }] += gj * db(x, y);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                for (x, gj) in ga.iter_mut().zip(gd) {
                    *x += c * gj;
                }
            }),
            Op::Shift(a) => acc(*a, &|ga| add_into(ga, gd)),
            Op::AddBias(a, bias) => {
                acc(*a, &|ga| add_into(ga, gd));
                let n = self.value(*bias).numel();
                acc(*bias, &|gb| {
                    for row in gd.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Activation(act, a) => {
                let y = node.value.data();
                acc(*a, &|ga| {
                    for ((x, gj), yj) in ga.iter_mut().zip(gd).zip(y) {
                        *x += gj
                            * match act {
                                Activation::Sigmoid => yj * (1.0 - yj),
                                Activation::Tanh => 1.0 - yj * yj,
                            };
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    acc(*v, &|gv| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::SumAll(a) => {
                let s = gd[0];
                acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::SumLast(a) => {
                let k = self.value(*a).last_dim();
                acc(*a, &|ga| {
                    for (row, s) in ga.chunks_mut(k.max(1)).zip(gd) {
                        row.iter_mut().for_each(|x| *x += s);
                    }
                });
            }
            Op::MaskedSoftmax { input, mask } => {
                let y = node.value.data();
                let k = node.value.last_dim();
                acc(*input, &|gx| {
                    for r in 0..node.value.outer_len() {
                        let span = r * k..(r + 1) * k;
                        let dot: f64 = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            if mask[j] {
                                gx[j] += y[j] * (gd[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Nll {
                logits,
                probs,
                mask,
                targets,
            } => {
                let k = self.value(*logits).last_dim();
                let scale = gd[0] / targets.len() as f64;
                acc(*logits, &|gx| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let idx = r * k + j;
                            if mask[idx] {
                                let hot = if j == t { 1.0 } else { 0.0 };
                                gx[idx] += scale * (probs[idx] - hot);
                            }
                        }
                    }
                });
            }
            Op::MulConst(a, factors) => acc(*a, &|ga| {
                for ((x, gj), f) in ga.iter_mut().zip(gd).zip(factors) {
                    *x += gj * f;
                }
            }),
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                acc(*table, &|gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SelectRows { keep, on, off } => {
                let k = node.value.last_dim();
                for (v, want) in [(*on, true), (*off, false)] {
                    acc(v, &|gv| {
                        for (r, &kr) in keep.iter().enumerate() {
                            if kr == want {
                                add_into(&mut gv[r * k..(r + 1) * k], &gd[r * k..(r + 1) * k]);
                            }
                        }
                    });
                }
            }
            Op::WeightedSum { weights, seq } => {
                let w = self.value(*weights);
                let n = seq.len();
                let (b, k) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*weights, &|gw| {
                    for (i, h) in seq.iter().enumerate() {
                        let ht = self.value(*h);
                        for r in 0..b {
                            let dot: f64 = ht.row(r).iter().zip(&gd[r * k..(r + 1) * k]).map(|(x, y)| x * y).sum();
                            gw[r * n + i] += dot;
                        }
                    }
                });
                for (i, h) in seq.iter().enumerate() {
                    acc(*h, &|gh| {
                        for r in 0..b {
                            let a = w.data()[r * n + i];
                            for (x, gj) in gh[r * k..(r + 1) * k].iter_mut().zip(&gd[r * k..(r + 1) * k]) {
                                *x += a * gj;
                            }
                        }
                    });
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Writes the masked softmax of `x` into `out` and returns the log-sum-exp
/// over unmasked entries, or `None` if every entry is masked.
fn softmax_row(x: &[f64], mask: &[bool], out: &mut [f64]) -> Option<f64> {
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(x).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Some(max + sum.ln())
}
