//! Answer normalization and the scalar QA metrics.
//!
//! Normalization follows the usual open-domain QA convention: lowercase,
//! drop punctuation, drop the articles `a`/`an`/`the`, split on whitespace.
//! EM and F1 measure correctness, Recall measures how much of a reference
//! answer a (possibly verbose) prediction covers, K-Precision measures how
//! much of a prediction is grounded in the supplied evidence, and the
//! memorization ratio counts how often a model sticks to its own memory.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("gold answer set is empty")]
    EmptyGolds,
    #[error("reference {0:?} normalizes to zero tokens")]
    EmptyReference(String),
    #[error("prediction {0:?} normalizes to zero tokens")]
    EmptyPrediction(String),
}

/// A normalized answer: lowercase word tokens with punctuation and articles removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub tokens: Vec<String>,
    pub source_text: String,
}

impl NormalizedAnswer {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_set(&self) -> HashSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }

    /// Tokens joined by single spaces; normalizing this string again is a fixed point.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

fn normalize_word(word: &str) -> Option<String> {
    let cleaned: String = word
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric())
        .collect();
    if cleaned.is_empty() || ARTICLES.contains(&cleaned.as_str()) {
        None
    } else {
        Some(cleaned)
    }
}

/// Normalized token for a single whitespace-delimited word, if it survives normalization.
///
/// `normalize(text).tokens` equals the concatenation of `normalized_word` over
/// `text.split_whitespace()`.
pub fn normalized_word(word: &str) -> Option<String> {
    normalize_word(word)
}

pub fn normalize(text: &str) -> NormalizedAnswer {
    NormalizedAnswer {
        tokens: text.split_whitespace().filter_map(normalize_word).collect(),
        source_text: text.to_string(),
    }
}

/// Token set of a string after normalization.
pub fn token_set(text: &str) -> HashSet<String> {
    normalize(text).tokens.into_iter().collect()
}

pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<bool, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGolds);
    }
    let p = normalize(pred).tokens;
    Ok(golds.iter().any(|g| normalize(g.as_ref()).tokens == p))
}

/// Token-multiset F1 between a prediction and a single gold answer.
///
/// Computed as `2·overlap / (|pred| + |gold|)`, which equals `2PR/(P+R)`.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred).tokens;
    let g = normalize(gold).tokens;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    (2 * overlap) as f64 / (p.len() + g.len()) as f64
}

/// Fraction of distinct gold tokens that appear in the prediction.
pub fn recall(pred: &str, gold: &str) -> Result<f64, MetricError> {
    let g = normalize(gold);
    if g.is_empty() {
        return Err(MetricError::EmptyReference(gold.to_string()));
    }
    let gold_set = g.token_set();
    let pred_tokens = normalize(pred);
    let pred_set = pred_tokens.token_set();
    let hit = gold_set.iter().filter(|t| pred_set.contains(*t)).count();
    Ok(hit as f64 / gold_set.len() as f64)
}

/// Fraction of distinct prediction tokens found anywhere in the evidence texts.
pub fn k_precision<S: AsRef<str>>(pred: &str, evidence_texts: &[S]) -> Result<f64, MetricError> {
    let p = normalize(pred);
    if p.is_empty() {
        return Err(MetricError::EmptyPrediction(pred.to_string()));
    }
    let evidence: HashSet<String> = evidence_texts
        .iter()
        .flat_map(|e| normalize(e.as_ref()).tokens)
        .collect();
    let pred_set = p.token_set();
    let hit = pred_set.iter().filter(|t| evidence.contains(**t)).count();
    Ok(hit as f64 / pred_set.len() as f64)
}

pub fn max_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    golds
        .iter()
        .map(|g| f1(pred, g.as_ref()))
        .fold(0.0, f64::max)
}

/// Maximum recall over the golds that normalize to at least one token.
pub fn max_recall<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64, MetricError> {
    let mut best: Option<f64> = None;
    for g in golds {
        if let Ok(r) = recall(pred, g.as_ref()) {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    best.ok_or(MetricError::EmptyGolds)
}

/// Counts of conflicted predictions that relied on internal memory (`f_m`)
/// versus external sources (`f_s`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemCounts {
    pub f_m: u64,
    pub f_s: u64,
}

impl MemCounts {
    pub fn new(f_m: u64, f_s: u64) -> Self {
        Self { f_m, f_s }
    }

    pub fn total(&self) -> u64 {
        self.f_m + self.f_s
    }
}

/// `f_m / (f_m + f_s)`; `None` when both counts are zero.
pub fn memorization_ratio(c: MemCounts) -> Option<f64> {
    match c.total() {
        0 => None,
        n => Some(c.f_m as f64 / n as f64),
    }
}

/// How a model's prediction under conflict relates to its closed-book memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviorCategory {
    /// Incorrect memory abandoned in favour of the conflicting evidence.
    ChangeInco,
    /// Incorrect memory kept despite the conflicting evidence.
    SustainInco,
    /// Correct memory abandoned in favour of the conflicting evidence.
    ChangeCorr,
    /// Correct memory kept despite the conflicting evidence.
    SustainCorr,
    Other,
}

impl BehaviorCategory {
    pub const ALL: [BehaviorCategory; 5] = [
        BehaviorCategory::ChangeInco,
        BehaviorCategory::SustainInco,
        BehaviorCategory::ChangeCorr,
        BehaviorCategory::SustainCorr,
        BehaviorCategory::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorCategory::ChangeInco => "ChangeInco",
            BehaviorCategory::SustainInco => "SustainInco",
            BehaviorCategory::ChangeCorr => "ChangeCorr",
            BehaviorCategory::SustainCorr => "SustainCorr",
            BehaviorCategory::Other => "Other",
        }
    }

    pub fn is_sustain(&self) -> bool {
        matches!(self, BehaviorCategory::SustainInco | BehaviorCategory::SustainCorr)
    }

    pub fn is_change(&self) -> bool {
        matches!(self, BehaviorCategory::ChangeInco | BehaviorCategory::ChangeCorr)
    }
}

impl std::fmt::Display for BehaviorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn recall_or_zero(pred: &str, reference: &str) -> f64 {
    recall(pred, reference).unwrap_or(0.0)
}

/// Place a conflicted prediction into one of the four behavior groups, or `Other`.
///
/// The prediction "sticks" when its recall against the memory answer reaches
/// `threshold`, and "follows" the conflict when its recall against the
/// conflicting answer does. Exactly one firing decides the category.
pub fn classify_behavior<S: AsRef<str>>(
    pred: &str,
    memory_answer: &str,
    golds: &[S],
    conflict_answer: &str,
    threshold: f64,
) -> BehaviorCategory {
    let memory_correct = exact_match(memory_answer, golds).unwrap_or(false);
    let sticks = recall_or_zero(pred, memory_answer) >= threshold;
    let follows = recall_or_zero(pred, conflict_answer) >= threshold;
    match (sticks, follows, memory_correct) {
        (true, false, true) => BehaviorCategory::SustainCorr,
        (true, false, false) => BehaviorCategory::SustainInco,
        (false, true, true) => BehaviorCategory::ChangeCorr,
        (false, true, false) => BehaviorCategory::ChangeInco,
        _ => BehaviorCategory::Other,
    }
}
