//! The `seqattn` command line.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use seqattn_core::data::{
    entity_number, entity_symbol, generate_synthetic_task, import_cnn_format, load_pretrained_embeddings,
    read_canonical, validate_examples, write_canonical, ClozeExample, RawExample, SyntheticRule,
    SyntheticTaskSpec, Vocabulary,
};
use seqattn_core::reader::{ReaderConfig, ReaderModel};
use seqattn_core::tensor::Tensor;
use seqattn_core::train::{
    dump_attention, evaluate_accuracy, format_grid, run_grid, train, write_metrics, MetricsRecord,
};

use config::{FileConfig, ModelArgs, TrainArgs, PAPER_VOCAB};

pub const MODEL_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser, Debug)]
#[command(name = "seqattn", version, about = "Attention readers for cloze-style reading comprehension")]
pub struct Cli {
    /// Directory that relative data paths are resolved against.
    #[arg(long, global = true, env = "SEQATTN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert CNN `.question` files into a JSONL dataset.
    Import {
        /// Files, or directories whose `.question` files are read in name order.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Drop unanswerable examples and report what was removed.
    Validate {
        input: PathBuf,
        /// Where to write the kept examples.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write a generated synthetic task as JSONL.
    GenSynthetic {
        #[arg(long, value_parser = parse_rule)]
        rule: SyntheticRule,
        #[arg(long)]
        examples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
        passage_len: Option<Vec<usize>>,
        #[arg(long)]
        mention_rate: Option<f64>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Train one model and save it with its vocabulary and metrics.
    Train {
        #[command(flatten)]
        data: TrainData,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Accuracy of a saved model on a dataset.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        data: PathBuf,
        /// Write `id predicted gold` lines here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train every variant on the same data and print a comparison table.
    Grid {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        test: PathBuf,
        /// Also write the rows, with per-epoch metrics, as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write the attention weights of a saved model on one example.
    DumpAttention {
        #[arg(long)]
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        id: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print trainable parameter counts.
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainData {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Whitespace-separated text vectors for initializing embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Settings {
    /// TOML file with `[model]` and `[train]` tables; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

impl Settings {
    fn resolve(&self, data_dir: Option<&Path>) -> Result<(ModelArgs, TrainArgs)> {
        let file = match &self.config {
            Some(p) => FileConfig::load(&resolve(data_dir, p))?,
            None => FileConfig::default(),
        };
        Ok((self.model.overlay(&file.model), self.train.overlay(&file.train)))
    }
}

fn parse_rule(s: &str) -> Result<SyntheticRule, String> {
    match s {
        "positional-easy" | "positional" => Ok(SyntheticRule::PositionalEasy),
        "context-trigger" | "trigger" => Ok(SyntheticRule::ContextTrigger),
        _ => Err(format!("unknown rule {s:?}; expected positional-easy or context-trigger")),
    }
}

fn resolve(data_dir: Option<&Path>, path: &Path) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Import { inputs, output } => {
            let files = question_files(&inputs.iter().map(|p| resolve(dir, p)).collect::<Vec<_>>())?;
            let examples = files
                .iter()
                .enumerate()
                .map(|(i, f)| import_cnn_format(f, i as u64))
                .collect::<seqattn_core::Result<Vec<_>>>()?;
            write_canonical(&output, &examples)?;
            writeln!(out, "imported {} examples into {}", examples.len(), output.display())?;
        }
        Command::Validate { input, output } => {
            let (kept, report) = validate_examples(read_canonical(&resolve(dir, &input))?);
            if let Some(path) = output {
                write_canonical(&path, &kept)?;
            }
            writeln!(out, "kept {} dropped {}", report.kept, report.dropped.len())?;
            for (id, reason) in &report.dropped {
                writeln!(out, "{id}\t{}", serde_json::to_string(reason)?)?;
            }
        }
        Command::GenSynthetic { rule, examples, seed, entities, passage_len, mention_rate, output } => {
            let mut spec = SyntheticTaskSpec::new(rule, examples, seed);
            if let Some(k) = entities {
                spec.entities = k;
            }
            if let Some(r) = passage_len {
                spec.passage_len = (r[0], r[1]);
            }
            if let Some(m) = mention_rate {
                spec.mention_rate = m;
            }
            let data = generate_synthetic_task(&spec)?;
            write_canonical(&output, &data)?;
            writeln!(out, "wrote {} examples to {}", data.len(), output.display())?;
        }
        Command::Train { data, out: dest, settings } => {
            let (model_args, train_args) = settings.resolve(dir)?;
            let prepared = Prepared::load(dir, &data, &[], &model_args)?;
            prepared.report(out)?;
            let cfg = train_args.train_config();
            let model = ReaderModel::build(prepared.config.clone(), prepared.embeddings.clone())?;
            writeln!(out, "{} parameters", model.count_parameters().total)?;
            let outcome = train(model, &prepared.train, &prepared.dev, &cfg, |r| {
                let _ = writeln!(out, "{}", epoch_line(r));
            })?;
            fs::create_dir_all(&dest).with_context(|| format!("creating {}", dest.display()))?;
            prepared.vocab.save(&dest.join(VOCAB_FILE))?;
            outcome.best.save(&dest.join(MODEL_FILE), Some(&prepared.vocab.hash()))?;
            write_metrics(&dest.join(METRICS_FILE), &outcome.metrics)?;
            match outcome.best_dev_accuracy {
                Some(acc) => writeln!(out, "best dev accuracy {acc:.4} at epoch {}", outcome.best_epoch)?,
                None => writeln!(out, "no epochs run; saved the initial model")?,
            }
        }
        Command::Eval { model, data, predictions } => {
            let (model, vocab) = load_model(&model)?;
            let examples = encode_file(dir, &data, &vocab)?;
            let eval = evaluate_accuracy(&model, &examples)?;
            if let Some(path) = predictions {
                let text: String = eval
                    .predictions
                    .iter()
                    .map(|(id, p, g)| format!("{id}\t{}\t{}\n", entity_symbol(*p), entity_symbol(*g)))
                    .collect();
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            writeln!(out, "accuracy {:.4} on {} examples", eval.accuracy, examples.len())?;
        }
        Command::Grid { data, test, json, settings } => {
            let (model_args, train_args) = settings.resolve(dir)?;
            let prepared = Prepared::load(dir, &data, &[test], &model_args)?;
            prepared.report(out)?;
            let cfg = train_args.train_config();
            let rows = run_grid(
                &prepared.config,
                &cfg,
                &prepared.train,
                &prepared.dev,
                &prepared.extra[0],
                prepared.embeddings.as_ref(),
            )?;
            write!(out, "{}", format_grid(&rows))?;
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&rows)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::DumpAttention { model, data, id, output } => {
            let (model, vocab) = load_model(&model)?;
            let examples = encode_file(dir, &data, &vocab)?;
            let Some(ex) = examples.iter().find(|e| e.id == id) else {
                bail!("no usable example with id {id} in {}", data.display());
            };
            let dump = dump_attention(&model, &vocab, ex, &output)?;
            writeln!(out, "predicted {} answer {}; wrote {}", dump.predicted, dump.answer, output.display())?;
        }
        Command::CountParams { model, config } => {
            let file = match config {
                Some(p) => FileConfig::load(&resolve(dir, &p))?,
                None => FileConfig::default(),
            };
            let args = model.overlay(&file.model);
            let vocab = args.vocab_size.unwrap_or(match args.preset() {
                config::Preset::Paper => PAPER_VOCAB,
                config::Preset::Small => 1000,
            });
            let count = ReaderModel::build(args.reader_config(vocab, 1), None)?.count_parameters();
            writeln!(out, "{}", count.total)?;
            for (group, n) in &count.by_group {
                writeln!(out, "  {group:?}\t{n}")?;
            }
        }
    }
    Ok(())
}

fn epoch_line(r: &MetricsRecord) -> String {
    format!(
        "epoch {:>3}  loss {:.4}  dev {:.4}  |g| {:.3}/{:.3}  {:.1}s",
        r.epoch, r.train_loss, r.dev_accuracy, r.grad_norm_mean, r.grad_norm_max, r.seconds
    )
}

fn question_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|p| p.extension().is_some_and(|x| x == "question"));
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no .question files found");
    }
    Ok(files)
}

fn load_model(dir: &Path) -> Result<(ReaderModel, Vocabulary)> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let (model, hash) = ReaderModel::load(&dir.join(MODEL_FILE))?;
    if let Some(h) = hash {
        if h != vocab.hash() {
            bail!("{} does not match the vocabulary the model was trained with", dir.join(VOCAB_FILE).display());
        }
    }
    Ok((model, vocab))
}

fn encode_all(examples: &[RawExample], vocab: &Vocabulary) -> Result<Vec<ClozeExample>> {
    Ok(examples.iter().map(|e| vocab.encode(e)).collect::<seqattn_core::Result<_>>()?)
}

fn encode_file(dir: Option<&Path>, path: &Path, vocab: &Vocabulary) -> Result<Vec<ClozeExample>> {
    let (kept, _) = validate_examples(read_canonical(&resolve(dir, path))?);
    encode_all(&kept, vocab)
}

/// Validated, encoded splits with the vocabulary and model configuration
/// derived from them.
struct Prepared {
    vocab: Vocabulary,
    config: ReaderConfig,
    embeddings: Option<Tensor>,
    train: Vec<ClozeExample>,
    dev: Vec<ClozeExample>,
    extra: Vec<Vec<ClozeExample>>,
    /// Examples removed from each split by validation.
    dropped: Vec<(PathBuf, usize)>,
}

impl Prepared {
    fn report(&self, out: &mut dyn Write) -> Result<()> {
        for (path, n) in self.dropped.iter().filter(|(_, n)| *n > 0) {
            writeln!(out, "dropped {n} unusable examples from {}", path.display())?;
        }
        writeln!(out, "vocabulary {} tokens, {} entity columns", self.vocab.len(), self.config.max_entities)?;
        Ok(())
    }
}

impl Prepared {
    fn load(dir: Option<&Path>, data: &TrainData, extra: &[PathBuf], args: &ModelArgs) -> Result<Self> {
        let (mut splits, mut dropped) = (Vec::new(), Vec::new());
        for path in [&data.train, &data.dev].into_iter().chain(extra) {
            let (kept, report) = validate_examples(read_canonical(&resolve(dir, path))?);
            if kept.is_empty() {
                bail!("{} has no usable examples", path.display());
            }
            dropped.push((path.clone(), report.dropped.len()));
            splits.push(kept);
        }
        let span = splits
            .iter()
            .flatten()
            .flat_map(|e| e.passage.iter().chain(&e.question))
            .filter_map(|t| entity_number(t))
            .max()
            .map_or(1, |n| n + 1);
        // Every entity column gets a vocabulary row, including ones seen only
        // outside the training split.
        let symbols: Vec<String> = (0..span).map(entity_symbol).collect();
        let vocab = Vocabulary::build(
            splits[0]
                .iter()
                .map(|e| e.passage.iter().chain(&e.question).map(String::as_str).collect::<Vec<_>>())
                .chain([symbols.iter().map(String::as_str).collect()]),
            args.vocab_limit(),
        );
        let config = args.reader_config(vocab.len(), span);
        config.validate()?;
        let embeddings = match &data.embeddings {
            Some(p) => {
                let e = load_pretrained_embeddings(&resolve(dir, p), &vocab, config.embed_dim, config.seed)?;
                Some(e.table)
            }
            None => None,
        };
        let mut encoded = splits.iter().map(|s| encode_all(s, &vocab)).collect::<Result<Vec<_>>>()?;
        let extra = encoded.split_off(2);
        let dev = encoded.pop().expect("dev split");
        let train = encoded.pop().expect("train split");
        Ok(Prepared { vocab, config, embeddings, train, dev, extra, dropped })
    }
}
