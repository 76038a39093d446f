//! Visual place recognition over dense feature maps.
//!
//! A global VLAD descriptor shortlists database images; patch-level VLAD
//! descriptors then rerank the shortlist by mutual nearest-neighbour
//! matching with a spatial consistency score. Patches are weighted by how
//! rare they are in the database, and the aggregation layer can be
//! fine-tuned with keypoint-mined triplets.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod featureio;
pub mod finetune;
pub mod linalg;
pub mod matcher;
pub mod patch;
pub mod retrieval;
pub mod synth;
pub mod vlad;
pub mod weighting;

pub use error::{Error, Result};
