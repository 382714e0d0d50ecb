//! Minibatch SGD with global-norm clipping, evaluation, the six-variant
//! grid, and attention dumps.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, ClozeExample, Vocabulary};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::reader::{ModelVariant, Predictor, ReaderConfig, ReaderModel};
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Replaces the model's dropout rate for the run.
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a dev improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 32,
            clip_norm: 10.0,
            dropout: 0.2,
            epochs: 30,
            seed: 1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Equality on everything except wall-clock time.
    pub fn same_run_as(&self, other: &MetricsRecord) -> bool {
        MetricsRecord { seconds: 0.0, ..self.clone() } == MetricsRecord { seconds: 0.0, ..other.clone() }
    }
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Loss value and gradients of every trainable parameter, in store order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
}

/// Evaluates `loss_fn` on a fresh tape holding `store` and backpropagates.
pub fn compute_gradients<F>(store: &ParamStore, step: usize, loss_fn: F) -> Result<Gradients>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let loss = loss_fn(&mut tape, &p)?;
    let value = tape
        .value(loss)
        .item()
        .ok_or_else(|| Error::Contract("loss must be a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::NonFinite { step, loss: value });
    }
    tape.backward(loss)?;
    let grads = store
        .iter()
        .map(|(id, param)| param.trainable.then(|| tape.grad(p[id]).cloned()).flatten())
        .collect();
    Ok(Gradients { loss: value, grads })
}

/// Clips the gradients and applies `θ ← θ − lr·g`; returns the pre-clip norm.
pub fn apply_sgd(store: &mut ParamStore, grads: Gradients, lr: f64, clip_norm: f64, step: usize) -> Result<f64> {
    let (slots, mut present): (Vec<usize>, Vec<Tensor>) = grads
        .grads
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (i, g)))
        .unzip();
    let norm = clip_global_norm(&mut present, clip_norm);
    if !norm.is_finite() {
        return Err(Error::NonFinite { step, loss: grads.loss });
    }
    let mut params: Vec<_> = store.iter_mut().collect();
    for (i, g) in slots.into_iter().zip(present) {
        for (w, d) in params[i].value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One SGD update on `batch` with train-mode dropout.
pub fn sgd_step<R: Rng + ?Sized>(
    model: &mut ReaderModel,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut R,
    step: usize,
) -> Result<StepOutcome> {
    let m: &ReaderModel = model;
    let grads = compute_gradients(&m.store, step, |tape, p| Ok(m.loss(tape, p, batch, Mode::Train, rng)?.0))?;
    let loss = grads.loss;
    let grad_norm = apply_sgd(&mut model.store, grads, config.learning_rate, config.clip_norm, step)?;
    Ok(StepOutcome { loss, grad_norm })
}

/// Predictions for a dataset, in dataset order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `(example id, predicted entity, gold entity)`
    pub predictions: Vec<(u64, usize, usize)>,
}

const EVAL_BATCH: usize = 64;

/// Fraction of examples whose predicted entity is the answer. Work is split
/// across threads; the result does not depend on the split.
pub fn evaluate_accuracy(model: &dyn Predictor, data: &[ClozeExample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let workers = thread::available_parallelism().map_or(1, |n| n.get());
    // Whole batches per shard, so batch boundaries never depend on `workers`.
    let shard = data.len().div_ceil(workers).div_ceil(EVAL_BATCH) * EVAL_BATCH;
    let shards: Vec<Result<Vec<usize>>> = thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(shard)
            .map(|chunk| {
                s.spawn(move || -> Result<Vec<usize>> {
                    let mut out = Vec::with_capacity(chunk.len());
                    for batch in chunk.chunks(EVAL_BATCH) {
                        let refs: Vec<&ClozeExample> = batch.iter().collect();
                        out.extend(model.predict_entities(&Batch::from_examples(&refs)?)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut predicted = Vec::with_capacity(data.len());
    for s in shards {
        predicted.extend(s?);
    }
    let predictions: Vec<(u64, usize, usize)> = data
        .iter()
        .zip(predicted)
        .map(|(ex, p)| (ex.id, p, ex.answer))
        .collect();
    let hits = predictions.iter().filter(|(_, p, g)| p == g).count();
    Ok(Evaluation {
        accuracy: hits as f64 / data.len() as f64,
        predictions,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev accuracy (the
    /// initialization when no epoch ran).
    pub best: ReaderModel,
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains for `config.epochs` shuffled passes, evaluating on `dev` after
/// each. `on_epoch` sees every record as it is produced.
pub fn train(
    mut model: ReaderModel,
    train_set: &[ClozeExample],
    dev_set: &[ClozeExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training and dev sets must be nonempty".into()));
    }
    model.config.dropout = config.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut outcome = TrainOutcome {
        best: model.clone(),
        best_epoch: 0,
        best_dev_accuracy: None,
        metrics: Vec::with_capacity(config.epochs),
    };
    let mut step = 0;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let batches = make_batches(train_set, config.batch_size, config.seed, epoch as u64)?;
        let (mut loss_sum, mut norm_sum, mut norm_max, mut seen) = (0.0, 0.0, 0.0f64, 0usize);
        for batch in &batches {
            let out = sgd_step(&mut model, batch, config, &mut rng, step)?;
            step += 1;
            loss_sum += out.loss * batch.len() as f64;
            seen += batch.len();
            norm_sum += out.grad_norm;
            norm_max = norm_max.max(out.grad_norm);
        }
        let dev_accuracy = evaluate_accuracy(&model, dev_set)?.accuracy;
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            dev_accuracy,
            seconds: start.elapsed().as_secs_f64(),
            grad_norm_mean: norm_sum / batches.len() as f64,
            grad_norm_max: norm_max,
        };
        on_epoch(&record);
        outcome.metrics.push(record);
        if outcome.best_dev_accuracy.is_none_or(|b| dev_accuracy > b) {
            outcome.best = model.clone();
            outcome.best_epoch = epoch;
            outcome.best_dev_accuracy = Some(dev_accuracy);
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(outcome)
}

/// One row of the variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub variant: ModelVariant,
    pub parameters: usize,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains and evaluates every variant on the same data, seed and batch
/// order, one thread per variant. Rows come back in [`ModelVariant::ALL`]
/// order.
pub fn run_grid(
    base: &ReaderConfig,
    config: &TrainConfig,
    train_set: &[ClozeExample],
    dev_set: &[ClozeExample],
    test_set: &[ClozeExample],
    embeddings: Option<&Tensor>,
) -> Result<Vec<GridRow>> {
    run_variants(&ModelVariant::ALL, base, config, train_set, dev_set, test_set, embeddings)
}

/// [`run_grid`] restricted to `variants`.
pub fn run_variants(
    variants: &[ModelVariant],
    base: &ReaderConfig,
    config: &TrainConfig,
    train_set: &[ClozeExample],
    dev_set: &[ClozeExample],
    test_set: &[ClozeExample],
    embeddings: Option<&Tensor>,
) -> Result<Vec<GridRow>> {
    let run = |variant: ModelVariant| -> Result<GridRow> {
        let model = ReaderModel::build(base.clone().with_variant(variant), embeddings.cloned())?;
        let parameters = model.count_parameters().total;
        let out = train(model, train_set, dev_set, config, |_| {})?;
        Ok(GridRow {
            variant,
            parameters,
            best_epoch: out.best_epoch,
            dev_accuracy: out.best_dev_accuracy.unwrap_or(0.0),
            test_accuracy: evaluate_accuracy(&out.best, test_set)?.accuracy,
            metrics: out.metrics,
        })
    };
    thread::scope(|s| {
        let handles: Vec<_> = variants.iter().map(|&v| s.spawn(move || run(v))).collect();
        handles.into_iter().map(|h| h.join().expect("grid worker panicked")).collect()
    })
}

/// Markdown table with one row per variant.
pub fn format_grid(rows: &[GridRow]) -> String {
    let mut out = String::from("| model | parameters | best epoch | dev accuracy | test accuracy |\n");
    out.push_str("|---|---:|---:|---:|---:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} |\n",
            r.variant, r.parameters, r.best_epoch, r.dev_accuracy, r.test_accuracy
        ));
    }
    out
}

/// Per-token attention of one example, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub example_id: u64,
    pub variant: String,
    pub tokens: Vec<String>,
    pub alpha: Vec<f64>,
    pub raw_scores: Vec<f64>,
    pub predicted: String,
    pub answer: String,
    /// `Σγ_i` per position, sequential variants only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_sums: Option<Vec<f64>>,
    /// `1ᵀη_i` per position, sequential variants only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_sums: Option<Vec<f64>>,
}

pub fn attention_dump(model: &ReaderModel, vocab: &Vocabulary, example: &ClozeExample) -> Result<AttentionDump> {
    let batch = Batch::from_examples(&[example])?;
    let pred = model.predict(&batch)?.remove(0);
    let sums = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| r.iter().sum()).collect();
    let symbol = |n: usize| crate::data::entity_symbol(n);
    Ok(AttentionDump {
        example_id: example.id,
        variant: model.variant().map_or_else(|| "custom".to_string(), |v| v.to_string()),
        tokens: example.passage.iter().map(|&t| vocab.token(t).to_string()).collect(),
        alpha: pred.trace.alpha.clone(),
        raw_scores: pred.trace.raw_scores.clone(),
        predicted: symbol(pred.entity),
        answer: symbol(example.answer),
        gamma_sums: pred.trace.gamma.as_ref().map(sums),
        eta_sums: pred.trace.eta.as_ref().map(sums),
    })
}

/// Writes [`attention_dump`] as JSON to `path`.
pub fn dump_attention(model: &ReaderModel, vocab: &Vocabulary, example: &ClozeExample, path: &Path) -> Result<AttentionDump> {
    let dump = attention_dump(model, vocab, example)?;
    fs::write(path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(path, e))?;
    Ok(dump)
}
