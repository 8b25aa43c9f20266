//! Joint encoder for natural-language utterances and relational tables.
//!
//! The pipeline turns a JSONL corpus of tables-with-context into training
//! instances (`corpus`), selects the table rows most relevant to an utterance
//! (`snapshot`), linearizes each selected row into a token sequence
//! (`linearize`), and encodes the result with a transformer whose vertical
//! attention ties the same slot across rows (`encoder`). Pretraining combines
//! masked-language-model, masked-column, and cell-value-recovery objectives
//! (`pretrain`, `optim`), all built on a small reverse-mode autodiff engine
//! (`nn`). Checkpoints round-trip bit-exactly (`checkpoint`), and every
//! seeded entry point is deterministic, including under the `parallel`
//! feature (`exec`).

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod linearize;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod snapshot;
pub mod table;
#[cfg(test)]
pub(crate) mod test_support;
pub mod tokenizer;

pub use error::{Error, Result};
