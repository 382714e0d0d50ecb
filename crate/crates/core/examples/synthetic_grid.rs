//! Trains all six variants on a generated cloze task and prints the table.
//!
//! `cargo run --release --example synthetic_grid -- [positional|trigger] [epochs]`

use seqattn_core::data::{generate_synthetic_task, SyntheticRule, SyntheticTaskSpec, Vocabulary};
use seqattn_core::reader::{ModelVariant, ReaderConfig};
use seqattn_core::train::{format_grid, run_grid, TrainConfig};

fn main() -> seqattn_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let rule = match args.next().as_deref() {
        Some("trigger") => SyntheticRule::ContextTrigger,
        _ => SyntheticRule::PositionalEasy,
    };
    let epochs = args.next().and_then(|e| e.parse().ok()).unwrap_or(15);
    let split = |n, seed| generate_synthetic_task(&SyntheticTaskSpec::new(rule, n, seed));
    let (train, dev, test) = (split(2000, 1)?, split(500, 2)?, split(500, 3)?);
    let vocab = Vocabulary::from_examples(&train, usize::MAX);
    let encode = |raw: &[_]| raw.iter().map(|r| vocab.encode(r)).collect::<seqattn_core::Result<Vec<_>>>();
    let (train, dev, test) = (encode(&train)?, encode(&dev)?, encode(&test)?);
    let base = ReaderConfig {
        embed_bound: 2.0,
        ..ReaderConfig::small(ModelVariant::SrDot, vocab.len(), vocab.entity_span())
    };
    let config = TrainConfig {
        epochs,
        learning_rate: 0.2,
        batch_size: 8,
        dropout: 0.0,
        ..Default::default()
    };
    let rows = run_grid(&base, &config, &train, &dev, &test, None)?;
    print!("{}", format_grid(&rows));
    for r in &rows {
        let curve: Vec<String> = r.metrics.iter().map(|m| format!("{:.3}", m.dev_accuracy)).collect();
        println!("{}: {}", r.variant, curve.join(" "));
    }
    Ok(())
}
