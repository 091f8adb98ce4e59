//! Embedding diagnostics and adaptive retrieval-augmented decoding for
//! organ-structured report corpora.
//!
//! The crate is organised around a small set of data contracts:
//!
//! - [`embed`]: embedding matrices, label tables, and the binary on-disk
//!   format shared by every other module.
//! - [`diagnostics`]: PCA spectrum metrics (dim90/dim95, participation
//!   ratio), logistic-regression linear probes, and projection tests.
//! - [`sentencedb`]: the organ-indexed sentence database with exact
//!   flat cosine indices.
//! - [`retrieval`]: BLEU-2, MMR re-ranking, two-stage and text-to-text
//!   retrieval strategies, and Jaccard@k retrieval evaluation.
//! - [`orchestrator`]: the adaptive decode loop of trigger detection,
//!   retrieve, rollback, inject, and regenerate, with a replayable trace.
//! - [`trainprep`]: oracle-mixed training-sample assembly with loss-mask
//!   span annotation.
//! - [`synth`]: deterministic synthetic corpus generation for fixtures.

pub mod diagnostics;
pub mod embed;
pub mod orchestrator;
pub mod retrieval;
pub mod sentencedb;
pub mod synth;
pub mod trainprep;
pub mod util;
