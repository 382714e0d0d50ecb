//! Settings shared by several subcommands. Each field can come from a flag or
//! from a TOML file given with `--config`; flags win.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use seqattn_core::reader::{ModelVariant, ReaderConfig};
use seqattn_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 50k vocabulary, d=100, h=128.
    Paper,
    /// d=32, h=32; vocabulary and entity columns sized to the data.
    Small,
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelArgs {
    /// sr-dot, sr-bilinear, sr2-dot, sr2-bilinear, sa-elementwise or sa-partial-bilinear.
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attn_hidden: Option<usize>,
    #[arg(long)]
    pub max_entities: Option<usize>,
    /// Vocabulary size for `count-params`; training uses the built vocabulary.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Largest vocabulary to build from training data.
    #[arg(long)]
    pub vocab_limit: Option<usize>,
    /// Bound of the uniform embedding initializer when no vectors are loaded.
    #[arg(long)]
    pub embed_bound: Option<f64>,
    #[arg(long)]
    pub freeze_embeddings: Option<bool>,
    /// Seed for parameter initialization.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for batch order and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelArgs,
    pub train: TrainArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {{
        let (flags, file) = ($flags, $file);
        Self { $($field: flags.$field.clone().or(file.$field.clone())),+ }
    }};
}

pub const PAPER_VOCAB: usize = 50_000;

impl ModelArgs {
    pub fn overlay(&self, file: &ModelArgs) -> Self {
        overlay!(
            self,
            file,
            variant,
            preset,
            embed_dim,
            hidden,
            attn_hidden,
            max_entities,
            vocab_size,
            vocab_limit,
            embed_bound,
            freeze_embeddings,
            model_seed
        )
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or(Preset::Small)
    }

    pub fn vocab_limit(&self) -> usize {
        self.vocab_limit.unwrap_or(match self.preset() {
            Preset::Paper => PAPER_VOCAB,
            Preset::Small => usize::MAX,
        })
    }

    /// Resolves a model configuration for a vocabulary of `vocab_size`
    /// tokens whose entity numbers stay below `entity_span`.
    pub fn reader_config(&self, vocab_size: usize, entity_span: usize) -> ReaderConfig {
        let variant = self.variant.unwrap_or(ModelVariant::SaPartialBilinear);
        let mut c = match self.preset() {
            Preset::Paper => ReaderConfig {
                vocab_size,
                max_entities: ReaderConfig::paper(variant).max_entities.max(entity_span),
                ..ReaderConfig::paper(variant)
            },
            Preset::Small => ReaderConfig::small(variant, vocab_size, entity_span.max(1)),
        };
        if let Some(v) = self.embed_dim {
            c.embed_dim = v;
        }
        if let Some(v) = self.hidden {
            c.hidden = v;
        }
        if let Some(v) = self.attn_hidden {
            c.attn_hidden = v;
        }
        if let Some(v) = self.max_entities {
            c.max_entities = v;
        }
        if let Some(v) = self.embed_bound {
            c.embed_bound = v;
        }
        if let Some(v) = self.freeze_embeddings {
            c.train_embeddings = !v;
        }
        if let Some(v) = self.model_seed {
            c.seed = v;
        }
        c
    }
}

impl TrainArgs {
    pub fn overlay(&self, file: &TrainArgs) -> Self {
        overlay!(self, file, learning_rate, batch_size, clip_norm, dropout, epochs, seed, patience)
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            dropout: self.dropout.unwrap_or(d.dropout),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            patience: self.patience.or(d.patience),
        }
    }
}
