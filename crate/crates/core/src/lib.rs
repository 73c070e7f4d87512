//! Explanation-enhanced weakly-supervised text classification.
//!
//! The pipeline has two stages. Pseudo-labels are generated by alternately
//! querying a class oracle and a saliency oracle per document
//! ([`rounds`]). A multi-task encoder is then trained to predict both the
//! class and per-token saliency, the latter read off the last attention head
//! ([`model`], [`train`]). [`eval`] scores classifiers and explanations.

pub mod corpus;
pub mod eval;
pub mod graph;
pub mod model;
pub mod oracles;
pub mod rounds;
pub mod synthetic;
pub mod tokenizer;
pub mod train;
