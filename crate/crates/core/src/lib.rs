//! Multi-teacher data diversification for neural machine translation.
//!
//! The crate trains small transformer translation models from scratch, uses
//! several forward and backward teachers to re-translate a parallel corpus, and
//! trains a final model on the merged result. It also carries the evaluation
//! tooling (BLEU, Pairwise-BLEU, perplexity, ensemble confidence statistics)
//! and a runner for desk-scale experiments on synthetic translation tasks.

pub mod corpus;
pub mod decode;
pub mod diversify;
pub mod expcli;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tokenizer;
