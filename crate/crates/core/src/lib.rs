//! Memorization analysis for language-model generation logs.
//!
//! The crate is organised around the prefix-continuation protocol: a training
//! record is cut at a fixed character offset, the model continues the prefix,
//! and the continuation is compared word-by-word with the true suffix.
//!
//! - [`ingest`] parses generation logs and performs the prefix/suffix split.
//! - [`textmetrics`] computes the per-pair metrics (prefix match length, LCS,
//!   edit distance, weighted distance, ROUGE) and checks the relations among them.
//! - [`distribution`] summarises the skewed distribution of prefix match lengths.
//! - [`decomposition`] estimates per-position hazards, fits the geometric and
//!   linear-hazard models and measures mutual information between positions.
//! - [`embedding`] computes the embedding similarity gap.
//! - [`stats`] holds the signed-rank test, Spearman correlation and entropy.
//! - [`oracle`] contains exact brute-force classifiers over toy distributions
//!   and the synthetic data generators.
//! - [`pipeline`] wires everything into reproducible score/report runs.

pub mod decomposition;
pub mod distribution;
pub mod embedding;
pub mod error;
pub mod ingest;
pub mod oracle;
pub mod pipeline;
pub mod stats;
pub mod textmetrics;

pub use error::{Error, Result};
