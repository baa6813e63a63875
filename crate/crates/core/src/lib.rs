//! Knowledge-conflict evaluation for retrieval-augmented question answering.
//!
//! * [`text_metrics`]: answer normalization, EM/F1/recall/K-precision,
//!   memorization ratio and behavior categories.
//! * [`corpus`]: datasets, counterfactual evidence and evidence mixes.
//! * [`backends`]: the logit-provider abstraction, toy providers and the
//!   HTTP protocol (client and reference server).
//! * [`decoder`]: greedy and contrastive decoding.
//! * [`probe`]: closed-book memory induction and conflict probes.
//! * [`runner`]: experiment configuration, evaluation and reports.

pub mod backends;
pub mod corpus;
pub mod decoder;
pub mod jsonl;
pub mod probe;
pub mod prompt;
pub mod runner;
pub mod text_metrics;
