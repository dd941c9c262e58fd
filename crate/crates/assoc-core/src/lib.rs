//! Corpus-to-concept-map pipeline.
//!
//! Chunks sequential text into overlapping passages, trains a residual
//! contrastive transform over precomputed passage embeddings using temporal
//! co-occurrence pairs as the only signal, and clusters the transformed
//! embeddings at multiple granularities. Includes baselines, confound
//! controls, unseen-text assignment, and a planted-structure synthetic
//! benchmark that scores the whole pipeline against known labels.

pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod model;
pub mod inference;
pub mod pairs;
pub mod report;
pub mod synthbench;
pub mod util;
pub mod validation;
pub mod workspace;

pub use error::{Error, Result};
