//! Online continual knowledge learning (OCKL) simulator.
//!
//! The crate generates time-variant fact streams, drives single-pass online
//! training loops over pluggable learners under compute budgets, applies
//! coreset selection, and computes the stream-learning metrics: exact match,
//! adjacent-task backward/forward transfer, knowledge acquisition rate and
//! the knowledge gap.
//!
//! Module map:
//! - [`text`] and [`types`]: tokenization, answer normalization, hashed
//!   embeddings and the shared domain records.
//! - [`datagen`]: synthetic fact universes and knowledge/QA streams.
//! - [`metrics`]: EM, BWT, FWT, KAR and KG.
//! - [`coreset`]: random, k-center and model-based subset selection.
//! - [`learners`]: the learner contract, toy learners and strategy analogues.
//! - [`scheduler`]: the update/evaluate loop with budgeted discarding.
//! - [`extproto`]: the JSON-lines protocol for out-of-process learners.
//! - [`config`] and [`report`]: run configuration, presets and output files.

// `!(x >= 0.0)` is used on purpose so NaN is rejected along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coreset;
pub mod datagen;
pub mod extproto;
pub mod learners;
pub mod metrics;
pub mod report;
pub mod scheduler;
pub mod text;
pub mod types;

pub use text::{hash_embed, normalize_answer, tokenize};
pub use types::{AccuracyMatrix, EmbeddingVector, Fact, KnowledgeItem, QAItem, SourceRef};

/// Tool version recorded in manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
