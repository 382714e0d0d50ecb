//! Attentive readers for cloze-style reading comprehension.
//!
//! The crate contains everything needed to train and inspect the Stanford
//! Reader family and the Sequential Attention reader on a CPU:
//!
//! * [`tensor`]: dense `f64` tensors with a reverse-mode tape and a
//!   finite-difference gradient checker.
//! * [`encoder`]: embedding lookup and stacked bidirectional GRU encoders.
//! * [`attention`]: bilinear, dot-product, partial-bilinear and element-wise
//!   scoring, the attention RNN, and context vectors.
//! * [`reader`]: the six model variants, loss, prediction, parameter
//!   accounting and checkpoints.
//! * [`data`]: dataset ingestion, entity relabeling, vocabularies, embeddings,
//!   batching and synthetic tasks.
//! * [`train`]: SGD with global-norm clipping, evaluation, the variant grid
//!   and attention dumps.

pub mod attention;
pub mod data;
pub mod encoder;
mod error;
pub mod params;
pub mod reader;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
