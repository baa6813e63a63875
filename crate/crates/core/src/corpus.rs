//! Conflict datasets: ingestion, sampling, counterfactual evidence, evidence
//! mixes with controlled truthful/misleading/irrelevant counts, multi-hop
//! conflicts and popularity buckets.
//!
//! Every random choice is drawn from a ChaCha stream keyed by the caller's
//! seed and a purpose string, so a given seed reproduces the same selection
//! and ordering on every platform.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{generate_text, BackendError, TextGenerator};
use crate::text_metrics::{normalize, normalized_word, recall};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Invalid {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("requested {requested} items but only {eligible} are eligible")]
    InsufficientEligible { requested: usize, eligible: usize },
    #[error("item {item}: no alternate entity in the pool is distinct from the gold answers")]
    EmptyPool { item: String },
    #[error("item {item}: no supporting passage contains a gold answer")]
    NoTruthfulEvidence { item: String },
    #[error("item {item}: need {needed} {label} docs but only {available} are available")]
    InsufficientPool {
        item: String,
        label: EvidenceLabel,
        needed: usize,
        available: usize,
    },
    #[error("duplicate evidence id {0}")]
    DuplicateDocId(String),
    #[error("invalid mix spec: {0}")]
    InvalidSpec(String),
    #[error("item {item}: counterfactual generation failed after {attempts} attempts ({reason}); last output: {last_output:?}")]
    GenerationQuality {
        item: String,
        attempts: u32,
        reason: String,
        last_output: String,
    },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("item {item} has no hop structure")]
    MissingHops { item: String },
    #[error("item {item}: conflicting-hop budget {h} exceeds hop count {hops}")]
    HopBudget { item: String, h: usize, hops: usize },
    #[error("item {item}: evidence id {id} not found")]
    MissingEvidence { item: String, id: String },
    #[error("item {item}: evidence {id} does not mention answer {answer:?}")]
    EvidenceLacksAnswer { item: String, id: String, answer: String },
    #[error("bucket edges must be strictly increasing")]
    NonMonotoneEdges,
    #[error("memory evidence for item {0} is empty")]
    EmptyMemoryEvidence(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceLabel {
    Truthful,
    Misleading,
    Irrelevant,
}

impl EvidenceLabel {
    pub const ALL: [EvidenceLabel; 3] = [EvidenceLabel::Truthful, EvidenceLabel::Misleading, EvidenceLabel::Irrelevant];
}

impl std::fmt::Display for EvidenceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvidenceLabel::Truthful => "truthful",
            EvidenceLabel::Misleading => "misleading",
            EvidenceLabel::Irrelevant => "irrelevant",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Corpus,
    LlmCounterfactual,
    Substitution,
    InducedMemory,
}

/// A retrieved passage as it appears in the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub question: String,
    pub answer: String,
    pub evidence_id: String,
}

/// One dataset question. Serialized with the dataset JSONL schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub evidence: Vec<Passage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<Vec<Hop>>,
}

impl QAItem {
    pub fn supporting_evidence(&self) -> impl Iterator<Item = &str> {
        self.evidence.iter().map(|p| p.id.as_str())
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.evidence.iter().find(|p| p.id == id)
    }

    /// All normalized tokens of all gold answers.
    pub fn gold_tokens(&self) -> HashSet<String> {
        self.gold_answers.iter().flat_map(|g| normalize(g).tokens).collect()
    }

    /// Passages containing every token of at least one gold answer.
    pub fn truthful_passages(&self) -> Vec<&Passage> {
        self.evidence
            .iter()
            .filter(|p| contains_answer(&p.text, &self.gold_answers))
            .collect()
    }

    fn validate(&self, line: usize) -> Result<(), CorpusError> {
        let invalid = |field, message: &str| CorpusError::Invalid {
            line,
            field,
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("id", "must be non-empty"));
        }
        if self.gold_answers.is_empty() {
            return Err(invalid("gold_answers", "must be non-empty"));
        }
        if self.gold_answers.iter().all(|g| normalize(g).is_empty()) {
            return Err(invalid("gold_answers", "no gold answer survives normalization"));
        }
        let mut ids = HashSet::new();
        for p in &self.evidence {
            if p.text.trim().is_empty() {
                return Err(invalid("evidence", &format!("passage {} has empty text", p.id)));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(invalid("evidence", &format!("duplicate passage id {}", p.id)));
            }
        }
        if self.popularity == Some(0) {
            return Err(invalid("popularity", "must be positive"));
        }
        if let Some(hops) = &self.hops {
            if !(2..=4).contains(&hops.len()) {
                return Err(invalid("hops", &format!("expected 2-4 hops, got {}", hops.len())));
            }
            for h in hops {
                if !ids.contains(h.evidence_id.as_str()) {
                    return Err(invalid("hops", &format!("evidence id {} not in evidence", h.evidence_id)));
                }
            }
        }
        Ok(())
    }
}

/// True when the text contains every normalized token of some answer.
pub fn contains_answer<S: AsRef<str>>(text: &str, answers: &[S]) -> bool {
    answers
        .iter()
        .any(|a| !normalize(a.as_ref()).is_empty() && (recall(text, a.as_ref()) == Ok(1.0)))
}

/// True when the text shares no normalized token with any of the answers.
pub fn avoids_answers<S: AsRef<str>>(text: &str, answers: &[S]) -> bool {
    avoids_tokens(text, &answer_tokens(answers))
}

fn answer_tokens<S: AsRef<str>>(answers: &[S]) -> HashSet<String> {
    answers.iter().flat_map(|a| normalize(a.as_ref()).tokens).collect()
}

fn avoids_tokens(text: &str, tokens: &HashSet<String>) -> bool {
    text.split_whitespace()
        .filter_map(normalized_word)
        .all(|t| !tokens.contains(&t))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    pub id: String,
    pub text: String,
    pub label: EvidenceLabel,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Llm,
    Substitution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub item_id: String,
    pub original_answer: String,
    pub counterfactual_answer: String,
    pub conflicting_evidence: String,
    pub generator: GeneratorKind,
    pub temperature: f64,
}

impl CounterfactualRecord {
    pub fn provenance(&self) -> Provenance {
        match self.generator {
            GeneratorKind::Llm => Provenance::LlmCounterfactual,
            GeneratorKind::Substitution => Provenance::Substitution,
        }
    }
}

/// Checks a counterfactual against the gold answers of its item.
pub fn counterfactual_violation<S: AsRef<str>>(record: &CounterfactualRecord, golds: &[S]) -> Option<String> {
    let cf = normalize(&record.counterfactual_answer);
    if cf.is_empty() {
        return Some("counterfactual answer normalizes to nothing".into());
    }
    if golds.iter().any(|g| normalize(g.as_ref()).tokens == cf.tokens) {
        return Some("counterfactual answer equals a gold answer".into());
    }
    if recall(&record.conflicting_evidence, &record.counterfactual_answer).unwrap_or(0.0) < 1.0 {
        return Some("conflicting evidence lacks the counterfactual answer".into());
    }
    if !avoids_answers(&record.conflicting_evidence, golds) {
        return Some("conflicting evidence mentions a gold-answer token".into());
    }
    None
}

/// Counts of each evidence label in one mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictMixSpec {
    pub k: usize,
    pub n_truthful: usize,
    pub n_misleading: usize,
    pub n_irrelevant: usize,
    pub seed: u64,
}

impl ConflictMixSpec {
    pub fn new(n_truthful: usize, n_misleading: usize, n_irrelevant: usize, seed: u64) -> Self {
        Self {
            k: n_truthful + n_misleading + n_irrelevant,
            n_truthful,
            n_misleading,
            n_irrelevant,
            seed,
        }
    }

    /// Splits `k` by a truthful:misleading ratio; the rounding remainder is irrelevant evidence.
    pub fn from_ratio(k: usize, truthful: u32, misleading: u32, seed: u64) -> Result<Self, CorpusError> {
        let parts = (truthful + misleading) as usize;
        if parts == 0 {
            return Err(CorpusError::InvalidSpec("ratio 0:0".into()));
        }
        let t = k * truthful as usize / parts;
        let m = k * misleading as usize / parts;
        Ok(Self::new(t, m, k - t - m, seed))
    }

    pub fn count(&self, label: EvidenceLabel) -> usize {
        match label {
            EvidenceLabel::Truthful => self.n_truthful,
            EvidenceLabel::Misleading => self.n_misleading,
            EvidenceLabel::Irrelevant => self.n_irrelevant,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.k == 0 {
            return Err(CorpusError::InvalidSpec("K must be positive".into()));
        }
        if self.n_truthful + self.n_misleading + self.n_irrelevant != self.k {
            return Err(CorpusError::InvalidSpec(format!(
                "{} + {} + {} != K = {}",
                self.n_truthful, self.n_misleading, self.n_irrelevant, self.k
            )));
        }
        if ![3, 5, 10, 20].contains(&self.k) {
            log::warn!("K = {} is outside the usual {{3, 5, 10, 20}}", self.k);
        }
        Ok(())
    }
}

/// One built mix, sufficient to replay an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub item_id: String,
    pub spec: ConflictMixSpec,
    pub docs: Vec<EvidenceDoc>,
    /// The answer the misleading evidence supports, when there is any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflicting_hops: Option<usize>,
}

impl MixManifest {
    pub fn count(&self, label: EvidenceLabel) -> usize {
        self.docs.iter().filter(|d| d.label == label).count()
    }
}

/// Deterministic RNG stream for `(seed, purpose)`.
pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Reads a dataset in the JSONL schema. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<QAItem>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(BufReader::new(file))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<QAItem>, CorpusError> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: format!("line {line_no}"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: QAItem = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        item.validate(line_no)?;
        if !ids.insert(item.id.clone()) {
            return Err(CorpusError::Invalid {
                line: line_no,
                field: "id",
                message: format!("duplicate item id {}", item.id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

/// Seeded sample of `n` distinct items that have supporting evidence, in dataset order.
pub fn sample_eval_set(items: &[QAItem], n: usize, seed: u64) -> Result<Vec<QAItem>, CorpusError> {
    let eligible: Vec<&QAItem> = items.iter().filter(|i| !i.evidence.is_empty()).collect();
    if n > eligible.len() {
        return Err(CorpusError::InsufficientEligible {
            requested: n,
            eligible: eligible.len(),
        });
    }
    let mut picked = index::sample(&mut rng_for(seed, "eval-sample"), eligible.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| eligible[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCounterfactualConfig {
    pub temperature: f64,
    /// Additional attempts after the first when the output fails the quality checks.
    pub max_retries: u32,
    pub max_tokens: usize,
}

impl Default for LlmCounterfactualConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_retries: 3,
            max_tokens: 256,
        }
    }
}

/// Prompt used to distill a counterfactual. The output must end with two
/// lines, `Answer: ...` and `Evidence: ...`.
pub fn counterfactual_prompt(item: &QAItem, fixed_answer: Option<&str>) -> String {
    let mut p = String::from(
        "Write a fictional but fluent passage that contradicts the reference answer to the question.\n\
         Choose a different, plausible answer of the same type and never mention the reference answer.\n\n",
    );
    p.push_str(&format!("Question: {}\n", item.question));
    p.push_str(&format!("Reference answer: {}\n", item.gold_answers.join(" | ")));
    for passage in item.truthful_passages().into_iter().take(2) {
        p.push_str(&format!("Supporting evidence: {}\n", passage.text));
    }
    if let Some(a) = fixed_answer {
        p.push_str(&format!("Use this alternative answer: {a}\n"));
    }
    p.push_str("\nRespond in exactly this format:\nAnswer: <alternative answer>\nEvidence: <passage supporting it>\n");
    p
}

fn parse_counterfactual_output(text: &str) -> Option<(String, String)> {
    let mut answer = None;
    let mut evidence = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Answer:") {
            answer = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("Evidence:") {
            evidence = Some(rest.trim().to_string());
        } else if let Some(e) = evidence.as_mut() {
            if !line.is_empty() {
                e.push(' ');
                e.push_str(line);
            }
        }
    }
    match (answer, evidence) {
        (Some(a), Some(e)) if !a.is_empty() && !e.is_empty() => Some((a, e)),
        _ => None,
    }
}

fn llm_attempt<G: TextGenerator + ?Sized>(
    item: &QAItem,
    generator: &G,
    cfg: &LlmCounterfactualConfig,
    fixed_answer: Option<&str>,
) -> Result<CounterfactualRecord, CorpusError> {
    let prompt = counterfactual_prompt(item, fixed_answer);
    let attempts = cfg.max_retries + 1;
    let mut last_output = String::new();
    let mut reason = String::new();
    for _ in 0..attempts {
        let out = generate_text(generator, &prompt, cfg.temperature, cfg.max_tokens)?;
        match parse_counterfactual_output(&out) {
            None => reason = "output not in Answer/Evidence format".into(),
            Some((answer, evidence)) => {
                if let Some(fixed) = fixed_answer {
                    if normalize(&answer).tokens != normalize(fixed).tokens {
                        reason = "output ignored the requested alternative answer".into();
                        last_output = out;
                        continue;
                    }
                }
                let record = CounterfactualRecord {
                    item_id: item.id.clone(),
                    original_answer: item.gold_answers[0].clone(),
                    counterfactual_answer: answer,
                    conflicting_evidence: evidence,
                    generator: GeneratorKind::Llm,
                    temperature: cfg.temperature,
                };
                match counterfactual_violation(&record, &item.gold_answers) {
                    None => return Ok(record),
                    Some(why) => reason = why,
                }
            }
        }
        last_output = out;
    }
    Err(CorpusError::GenerationQuality {
        item: item.id.clone(),
        attempts,
        reason,
        last_output,
    })
}

/// Distills one counterfactual answer and conflicting passage from a text generator.
pub fn generate_counterfactual_llm<G: TextGenerator + ?Sized>(
    item: &QAItem,
    generator: &G,
    cfg: &LlmCounterfactualConfig,
) -> Result<CounterfactualRecord, CorpusError> {
    llm_attempt(item, generator, cfg, None)
}

/// `n` conflicting passages that all support the first generated counterfactual answer.
pub fn llm_counterfactual_variants<G: TextGenerator + ?Sized>(
    item: &QAItem,
    generator: &G,
    cfg: &LlmCounterfactualConfig,
    n: usize,
) -> Result<Vec<CounterfactualRecord>, CorpusError> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let first = generate_counterfactual_llm(item, generator, cfg)?;
    let answer = first.counterfactual_answer.clone();
    out.push(first);
    for _ in 1..n {
        out.push(llm_attempt(item, generator, cfg, Some(&answer))?);
    }
    Ok(out)
}

/// Pool entries usable as an alternate for `answers`: non-empty after
/// normalization, sharing no token with any answer, deduplicated.
pub fn eligible_alternates<'a, S: AsRef<str>>(answers: &[S], pool: &'a [String]) -> Vec<&'a String> {
    let mut seen = BTreeSet::new();
    pool.iter()
        .filter(|e| {
            let n = normalize(e);
            !n.is_empty() && avoids_answers(e, answers) && seen.insert(n.tokens)
        })
        .collect()
}

fn split_affixes(word: &str) -> (&str, &str) {
    let start = word.find(char::is_alphanumeric).unwrap_or(word.len());
    let end = word
        .rfind(char::is_alphanumeric)
        .map(|i| i + word[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    (&word[..start], &word[end.max(start)..])
}

/// Replaces every mention of the answers in `text` with `alternate`.
///
/// Whole multi-word mentions are replaced first; any remaining word that
/// normalizes to an answer token is replaced as well, so the result shares
/// no normalized token with the answers unless `alternate` does. Runs of
/// whitespace collapse to single spaces.
pub fn substitute_mentions<S: AsRef<str>>(text: &str, answers: &[S], alternate: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let norms: Vec<Option<String>> = words.iter().map(|w| normalized_word(w)).collect();
    let mut mentions: Vec<Vec<String>> = answers
        .iter()
        .map(|a| normalize(a.as_ref()).tokens)
        .filter(|t| !t.is_empty())
        .collect();
    mentions.sort_by_key(|m| std::cmp::Reverse(m.len()));
    let answer_tokens: HashSet<&String> = mentions.iter().flatten().collect();

    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let matched = mentions.iter().find(|m| {
            i + m.len() <= words.len() && m.iter().enumerate().all(|(j, t)| norms[i + j].as_ref() == Some(t))
        });
        let span = match matched {
            Some(m) => m.len(),
            None if norms[i].as_ref().is_some_and(|n| answer_tokens.contains(n)) => 1,
            None => 0,
        };
        if span == 0 {
            out.push(words[i].to_string());
            i += 1;
        } else {
            let (prefix, _) = split_affixes(words[i]);
            let (_, suffix) = split_affixes(words[i + span - 1]);
            out.push(format!("{prefix}{alternate}{suffix}"));
            i += span;
        }
    }
    out.join(" ")
}

fn pick_alternate<'a>(item_key: &str, answers: &[String], pool: &'a [String], seed: u64) -> Option<&'a String> {
    let eligible = eligible_alternates(answers, pool);
    eligible.choose(&mut rng_for(seed, &format!("alternate/{item_key}"))).copied()
}

/// Entity-substitution counterfactual built from the first truthful passage.
pub fn generate_counterfactual_substitution(
    item: &QAItem,
    entity_pool: &[String],
    seed: u64,
) -> Result<CounterfactualRecord, CorpusError> {
    let mut all = substitution_counterfactuals(item, entity_pool, seed)?;
    Ok(all.swap_remove(0))
}

/// One substitution counterfactual per truthful passage, all using the same alternate.
pub fn substitution_counterfactuals(
    item: &QAItem,
    entity_pool: &[String],
    seed: u64,
) -> Result<Vec<CounterfactualRecord>, CorpusError> {
    let alternate = pick_alternate(&item.id, &item.gold_answers, entity_pool, seed)
        .ok_or_else(|| CorpusError::EmptyPool { item: item.id.clone() })?;
    let passages = item.truthful_passages();
    if passages.is_empty() {
        return Err(CorpusError::NoTruthfulEvidence { item: item.id.clone() });
    }
    Ok(passages
        .into_iter()
        .map(|p| CounterfactualRecord {
            item_id: item.id.clone(),
            original_answer: item.gold_answers[0].clone(),
            counterfactual_answer: alternate.clone(),
            conflicting_evidence: substitute_mentions(&p.text, &item.gold_answers, alternate),
            generator: GeneratorKind::Substitution,
            temperature: 0.0,
        })
        .collect())
}

/// Default entity pool: every gold answer in the dataset.
pub fn answer_pool(items: &[QAItem]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .iter()
        .flat_map(|i| i.gold_answers.iter())
        .filter(|a| seen.insert(a.as_str()))
        .cloned()
        .collect()
}

/// Every passage of every item except `exclude_item`, for irrelevant-evidence draws.
pub fn passage_pool(items: &[QAItem], exclude_item: &str) -> Vec<Passage> {
    items
        .iter()
        .filter(|i| i.id != exclude_item)
        .flat_map(|i| i.evidence.iter().cloned())
        .collect()
}

fn seeded_subset<T: Clone>(candidates: &[T], n: usize, seed: u64, purpose: &str) -> Vec<T> {
    let mut idx = index::sample(&mut rng_for(seed, purpose), candidates.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| candidates[i].clone()).collect()
}

fn shuffled(mut docs: Vec<EvidenceDoc>, seed: u64, purpose: &str) -> Vec<EvidenceDoc> {
    docs.shuffle(&mut rng_for(seed, purpose));
    docs
}

fn check_unique(docs: &[EvidenceDoc]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateDocId(d.id.clone()));
        }
    }
    Ok(())
}

/// Builds an evidence list with exactly the mix's per-label counts, in seeded random order.
///
/// Truthful docs are the item's passages that contain a gold answer;
/// misleading docs are the item's counterfactual passages; irrelevant docs
/// come from `irrelevant_pool` passages mentioning neither a gold nor a
/// counterfactual answer token.
pub fn build_evidence_mix(
    item: &QAItem,
    spec: &ConflictMixSpec,
    counterfactuals: &[CounterfactualRecord],
    irrelevant_pool: &[Passage],
) -> Result<Vec<EvidenceDoc>, CorpusError> {
    spec.validate()?;
    let short = |label, needed, available| CorpusError::InsufficientPool {
        item: item.id.clone(),
        label,
        needed,
        available,
    };

    let truthful: Vec<EvidenceDoc> = item
        .truthful_passages()
        .into_iter()
        .map(|p| EvidenceDoc {
            id: p.id.clone(),
            text: p.text.clone(),
            label: EvidenceLabel::Truthful,
            provenance: Provenance::Corpus,
        })
        .collect();
    if truthful.len() < spec.n_truthful {
        return Err(short(EvidenceLabel::Truthful, spec.n_truthful, truthful.len()));
    }

    let own: Vec<&CounterfactualRecord> = counterfactuals.iter().filter(|c| c.item_id == item.id).collect();
    let misleading: Vec<EvidenceDoc> = own
        .iter()
        .enumerate()
        .map(|(i, c)| EvidenceDoc {
            id: format!("{}::cf{}", item.id, i),
            text: c.conflicting_evidence.clone(),
            label: EvidenceLabel::Misleading,
            provenance: c.provenance(),
        })
        .collect();
    if misleading.len() < spec.n_misleading {
        return Err(short(EvidenceLabel::Misleading, spec.n_misleading, misleading.len()));
    }

    let mut excluded: Vec<&str> = item.gold_answers.iter().map(String::as_str).collect();
    excluded.extend(own.iter().map(|c| c.counterfactual_answer.as_str()));
    let excluded = answer_tokens(&excluded);
    let own_ids: HashSet<&str> = item.supporting_evidence().collect();
    let mut seen_ids = HashSet::new();
    let irrelevant: Vec<EvidenceDoc> = irrelevant_pool
        .iter()
        .filter(|p| !own_ids.contains(p.id.as_str()) && avoids_tokens(&p.text, &excluded))
        .filter(|p| seen_ids.insert(p.id.as_str()))
        .map(|p| EvidenceDoc {
            id: p.id.clone(),
            text: p.text.clone(),
            label: EvidenceLabel::Irrelevant,
            provenance: Provenance::Corpus,
        })
        .collect();
    if irrelevant.len() < spec.n_irrelevant {
        return Err(short(EvidenceLabel::Irrelevant, spec.n_irrelevant, irrelevant.len()));
    }

    let key = &item.id;
    let mut docs = seeded_subset(&truthful, spec.n_truthful, spec.seed, &format!("truthful/{key}"));
    docs.extend(seeded_subset(&misleading, spec.n_misleading, spec.seed, &format!("misleading/{key}")));
    docs.extend(seeded_subset(&irrelevant, spec.n_irrelevant, spec.seed, &format!("irrelevant/{key}")));
    check_unique(&docs)?;
    Ok(shuffled(docs, spec.seed, &format!("order/{key}")))
}

/// Convenience wrapper producing a manifest entry for a built mix.
pub fn build_manifest(
    item: &QAItem,
    spec: &ConflictMixSpec,
    counterfactuals: &[CounterfactualRecord],
    irrelevant_pool: &[Passage],
) -> Result<MixManifest, CorpusError> {
    let docs = build_evidence_mix(item, spec, counterfactuals, irrelevant_pool)?;
    let conflict_answer = counterfactuals
        .iter()
        .find(|c| c.item_id == item.id)
        .map(|c| c.counterfactual_answer.clone())
        .filter(|_| spec.n_misleading > 0);
    Ok(MixManifest {
        item_id: item.id.clone(),
        spec: *spec,
        docs,
        conflict_answer,
        conflicting_hops: None,
    })
}

/// Label under which induced memory joins the evidence: truthful when the
/// memory is correct, misleading otherwise.
pub fn memory_label(memory_correct: bool) -> EvidenceLabel {
    if memory_correct {
        EvidenceLabel::Truthful
    } else {
        EvidenceLabel::Misleading
    }
}

/// Adds the model's self-generated supporting evidence to a mix and reshuffles.
pub fn inject_memory_evidence(
    mix: &[EvidenceDoc],
    item_id: &str,
    memory_evidence: &str,
    label: EvidenceLabel,
    seed: u64,
) -> Result<Vec<EvidenceDoc>, CorpusError> {
    if memory_evidence.trim().is_empty() {
        return Err(CorpusError::EmptyMemoryEvidence(item_id.to_string()));
    }
    let mut docs = mix.to_vec();
    docs.push(EvidenceDoc {
        id: format!("{item_id}::memory"),
        text: memory_evidence.to_string(),
        label,
        provenance: Provenance::InducedMemory,
    });
    check_unique(&docs)?;
    Ok(shuffled(docs, seed, &format!("order+memory/{item_id}")))
}

/// Evidence for a multi-hop item with the first `h` hops conflicted.
///
/// Each hop contributes its truthful passage in hop order; a conflicted hop
/// is followed by a substitution counterfactual of that passage in which the
/// hop's sub-answer is replaced by an alternate from `entity_pool`.
pub fn build_multihop_conflicts(
    item: &QAItem,
    h: usize,
    entity_pool: &[String],
    seed: u64,
) -> Result<Vec<EvidenceDoc>, CorpusError> {
    let hops = item
        .hops
        .as_ref()
        .ok_or_else(|| CorpusError::MissingHops { item: item.id.clone() })?;
    if h > hops.len() {
        return Err(CorpusError::HopBudget {
            item: item.id.clone(),
            h,
            hops: hops.len(),
        });
    }
    let mut docs = Vec::with_capacity(hops.len() + h);
    for (i, hop) in hops.iter().enumerate() {
        let passage = item.passage(&hop.evidence_id).ok_or_else(|| CorpusError::MissingEvidence {
            item: item.id.clone(),
            id: hop.evidence_id.clone(),
        })?;
        docs.push(EvidenceDoc {
            id: passage.id.clone(),
            text: passage.text.clone(),
            label: EvidenceLabel::Truthful,
            provenance: Provenance::Corpus,
        });
        if i < h {
            let answer = std::slice::from_ref(&hop.answer);
            if !contains_answer(&passage.text, answer) {
                return Err(CorpusError::EvidenceLacksAnswer {
                    item: item.id.clone(),
                    id: passage.id.clone(),
                    answer: hop.answer.clone(),
                });
            }
            let alternate = pick_alternate(&format!("{}/hop{i}", item.id), answer, entity_pool, seed)
                .ok_or_else(|| CorpusError::EmptyPool { item: item.id.clone() })?;
            docs.push(EvidenceDoc {
                id: format!("{}::hop{}::cf", item.id, i),
                text: substitute_mentions(&passage.text, answer, alternate),
                label: EvidenceLabel::Misleading,
                provenance: Provenance::Substitution,
            });
        }
    }
    check_unique(&docs)?;
    Ok(docs)
}

/// Half-open popularity interval `[lower, upper)` and its items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityBucket {
    pub lower: f64,
    pub upper: f64,
    pub items: Vec<QAItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityBuckets {
    pub buckets: Vec<PopularityBucket>,
    /// Items without a popularity value.
    pub missing: usize,
    /// Items whose popularity falls outside `[edges[0], edges[last])`.
    pub out_of_range: usize,
}

pub const DEFAULT_POPULARITY_EDGES: [f64; 5] = [1e2, 1e3, 1e4, 1e5, 1e6];

pub fn popularity_buckets(items: &[QAItem], edges: &[f64]) -> Result<PopularityBuckets, CorpusError> {
    if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
        return Err(CorpusError::NonMonotoneEdges);
    }
    let mut buckets: Vec<PopularityBucket> = edges
        .windows(2)
        .map(|w| PopularityBucket {
            lower: w[0],
            upper: w[1],
            items: Vec::new(),
        })
        .collect();
    let mut missing = 0;
    let mut out_of_range = 0;
    for item in items {
        let Some(pop) = item.popularity else {
            missing += 1;
            continue;
        };
        let pop = pop as f64;
        match buckets.iter_mut().find(|b| b.lower <= pop && pop < b.upper) {
            Some(b) => b.items.push(item.clone()),
            None => out_of_range += 1,
        }
    }
    Ok(PopularityBuckets {
        buckets,
        missing,
        out_of_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FnGenerator;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn passage(id: &str, text: &str) -> Passage {
        Passage {
            id: id.into(),
            text: text.into(),
        }
    }

    fn nobel() -> QAItem {
        QAItem {
            id: "q1".into(),
            question: "Who won the 2023 Nobel Prize in Physics?".into(),
            gold_answers: vec!["Pierre Agostini".into()],
            evidence: vec![
                passage("e1", "Pierre Agostini won the 2023 Nobel Prize in Physics."),
                passage("e2", "The prize went to Agostini, Krausz and L'Huillier (Pierre Agostini)."),
                passage("e3", "Physicist Pierre Agostini works on attosecond pulses."),
                passage("e4", "Attosecond physics studies electron dynamics."),
            ],
            popularity: Some(5_000),
            hops: None,
        }
    }

    #[test]
    fn load_valid_file() {
        let text = r#"{"id":"a","question":"q?","gold_answers":["x"],"evidence":[{"id":"p","text":"x y"}]}
{"id":"b","question":"q?","gold_answers":["y"],"evidence":[],"popularity":120}

{"id":"c","question":"q?","gold_answers":["z"],"evidence":[{"id":"p1","text":"z1"},{"id":"p2","text":"z2"}],"hops":[{"question":"s1","answer":"z1","evidence_id":"p1"},{"question":"s2","answer":"z2","evidence_id":"p2"}]}
"#;
        let items = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[1].popularity, Some(120));
        assert_eq!(items[2].hops.as_ref().unwrap().len(), 2);
        assert!(parse_dataset("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn load_reports_line_of_missing_golds() {
        let text = "{\"id\":\"a\",\"question\":\"q\",\"gold_answers\":[\"x\"]}\n{\"id\":\"b\",\"question\":\"q\"}\n";
        match parse_dataset(text.as_bytes()) {
            Err(CorpusError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("gold_answers"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_names_invalid_field() {
        let cases = [
            (r#"{"id":"a","question":"q","gold_answers":[]}"#, "gold_answers"),
            (
                r#"{"id":"a","question":"q","gold_answers":["x"],"evidence":[{"id":"p","text":"x"}],"hops":[{"question":"s","answer":"x","evidence_id":"p"}]}"#,
                "hops",
            ),
            (r#"{"id":"a","question":"q","gold_answers":["x"],"popularity":0}"#, "popularity"),
            (r#"{"id":"a","question":"q","gold_answers":["x"],"evidence":[{"id":"p","text":" "}]}"#, "evidence"),
        ];
        for (line, field) in cases {
            match parse_dataset(line.as_bytes()) {
                Err(CorpusError::Invalid { field: f, line: 1, .. }) => assert_eq!(f, field),
                other => panic!("unexpected {other:?} for {line}"),
            }
        }
    }

    fn many(n: usize) -> Vec<QAItem> {
        (0..n)
            .map(|i| QAItem {
                id: format!("i{i:04}"),
                question: format!("question {i}"),
                gold_answers: vec![format!("answer{i}")],
                evidence: if i % 3 == 0 { vec![] } else { vec![passage(&format!("p{i}"), &format!("answer{i} text"))] },
                popularity: None,
                hops: None,
            })
            .collect()
    }

    #[test]
    fn sampling_is_deterministic_and_filters_unsupported() {
        let items = many(30);
        let eligible = items.iter().filter(|i| !i.evidence.is_empty()).count();
        assert_eq!(eligible, 20);
        let all = sample_eval_set(&items, eligible, 1).unwrap();
        assert_eq!(all.len(), 20);
        let a = sample_eval_set(&items, 7, 42).unwrap();
        let b = sample_eval_set(&items, 7, 42).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), 7);
        assert!(a.iter().all(|i| !i.evidence.is_empty()));
        assert!(matches!(
            sample_eval_set(&items, 21, 0),
            Err(CorpusError::InsufficientEligible {
                requested: 21,
                eligible: 20
            })
        ));
    }

    #[test]
    fn sample_500_of_1000() {
        let items: Vec<QAItem> = (0..1000)
            .map(|i| QAItem {
                id: format!("{i}"),
                question: "q".into(),
                gold_answers: vec!["a".into()],
                evidence: vec![passage("p", "a")],
                popularity: None,
                hops: None,
            })
            .collect();
        let s = sample_eval_set(&items, 500, 9).unwrap();
        assert_eq!(s.iter().map(|i| &i.id).collect::<HashSet<_>>().len(), 500);
    }

    #[test]
    fn substitution_simple_sentence() {
        let item = QAItem {
            id: "x".into(),
            question: "who?".into(),
            gold_answers: vec!["X".into()],
            evidence: vec![passage("p", "X won in 2023")],
            popularity: None,
            hops: None,
        };
        let r = generate_counterfactual_substitution(&item, &["Y".into()], 3).unwrap();
        assert_eq!(r.conflicting_evidence, "Y won in 2023");
        assert_eq!(r.counterfactual_answer, "Y");
        assert_eq!(r.generator, GeneratorKind::Substitution);
        assert!(matches!(
            generate_counterfactual_substitution(&item, &["x.".into()], 3),
            Err(CorpusError::EmptyPool { .. })
        ));
    }

    #[test]
    fn substitution_is_seeded_and_scrubs_gold_tokens() {
        let item = nobel();
        let pool: Vec<String> = ["Alain Aspect", "Benjamin List", "Pierre Curie", "Anne L'Huillier", "Ferenc Krausz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = substitution_counterfactuals(&item, &pool, 11).unwrap();
        let b = substitution_counterfactuals(&item, &pool, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for r in &a {
            assert_ne!(r.counterfactual_answer, "Pierre Curie");
            assert!(counterfactual_violation(r, &item.gold_answers).is_none(), "{r:?}");
            assert_eq!(recall(&r.conflicting_evidence, &r.counterfactual_answer).unwrap(), 1.0);
            assert_eq!(recall(&r.conflicting_evidence, &r.original_answer).unwrap(), 0.0);
        }
        // the stray surname and the parenthesised full mention are both replaced
        let alt = &a[1].counterfactual_answer;
        assert_eq!(
            a[1].conflicting_evidence,
            format!("The prize went to {alt}, Krausz and L'Huillier ({alt}).")
        );
    }

    #[test]
    fn substitution_preserves_punctuation_around_mentions() {
        let out = substitute_mentions("Winner: \"Pierre Agostini\", physicist.", &["Pierre Agostini"], "Alain Aspect");
        assert_eq!(out, "Winner: \"Alain Aspect\", physicist.");
    }

    fn scripted(outputs: Vec<String>) -> (FnGenerator, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&calls);
        let g = FnGenerator::new(move |_p, _t, _m| {
            let i = c.fetch_add(1, Ordering::SeqCst);
            Ok(outputs[i.min(outputs.len() - 1)].clone())
        });
        (g, calls)
    }

    #[test]
    fn llm_counterfactual_accepts_valid_output() {
        let (g, calls) = scripted(vec![
            "Answer: Alain Aspect\nEvidence: Alain Aspect won the 2023 Nobel Prize in Physics.".into(),
        ]);
        let r = generate_counterfactual_llm(&nobel(), &g, &LlmCounterfactualConfig::default()).unwrap();
        assert_eq!(r.counterfactual_answer, "Alain Aspect");
        assert_eq!(r.temperature, 1.0);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn llm_counterfactual_retries_then_succeeds() {
        let (g, calls) = scripted(vec![
            "Answer: Pierre Agostini\nEvidence: Pierre Agostini won.".into(),
            "Answer: Alain Aspect\nEvidence: Alain Aspect and Pierre Agostini shared it.".into(),
            "no format at all".into(),
            "Answer: Alain Aspect\nEvidence: Alain Aspect won the prize.".into(),
        ]);
        let r = generate_counterfactual_llm(&nobel(), &g, &LlmCounterfactualConfig::default()).unwrap();
        assert_eq!(r.conflicting_evidence, "Alain Aspect won the prize.");
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn llm_counterfactual_echoing_gold_exhausts_retries() {
        let (g, calls) = scripted(vec!["Answer: Pierre Agostini\nEvidence: Pierre Agostini won.".into()]);
        let cfg = LlmCounterfactualConfig::default();
        match generate_counterfactual_llm(&nobel(), &g, &cfg) {
            Err(CorpusError::GenerationQuality {
                attempts, last_output, ..
            }) => {
                assert_eq!(attempts, 4);
                assert!(last_output.contains("Pierre Agostini"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn llm_counterfactual_surfaces_transport_errors() {
        let g = FnGenerator::new(|_, _, _| {
            Err(BackendError::Transport {
                endpoint: "http://127.0.0.1:9".into(),
                attempts: 1,
                message: "connection refused".into(),
            })
        });
        assert!(matches!(
            generate_counterfactual_llm(&nobel(), &g, &LlmCounterfactualConfig::default()),
            Err(CorpusError::Backend(BackendError::Transport { .. }))
        ));
    }

    #[test]
    fn llm_variants_share_one_answer() {
        let g = FnGenerator::new(|prompt, _, _| {
            let n = prompt.len() % 7;
            Ok(format!("Answer: Alain Aspect\nEvidence: Alain Aspect won, report {n}."))
        });
        let v = llm_counterfactual_variants(&nobel(), &g, &LlmCounterfactualConfig::default(), 3).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|r| r.counterfactual_answer == "Alain Aspect"));
    }

    fn irrelevant_pool() -> Vec<Passage> {
        (0..6)
            .map(|i| passage(&format!("irr{i}"), &format!("Unrelated passage number {i} about rivers.")))
            .chain(std::iter::once(passage("bad", "Mentions Agostini in passing.")))
            .collect()
    }

    #[test]
    fn mix_counts_and_reproducible_order() {
        let item = nobel();
        let pool = vec!["Alain Aspect".to_string()];
        let cfs = substitution_counterfactuals(&item, &pool, 1).unwrap();
        let spec = ConflictMixSpec::new(2, 2, 1, 77);
        let a = build_evidence_mix(&item, &spec, &cfs, &irrelevant_pool()).unwrap();
        let b = build_evidence_mix(&item, &spec, &cfs, &irrelevant_pool()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 5);
        for label in EvidenceLabel::ALL {
            assert_eq!(a.iter().filter(|d| d.label == label).count(), spec.count(label));
        }
        assert!(a.iter().all(|d| d.id != "bad"));
        let other = build_evidence_mix(&item, &ConflictMixSpec { seed: 78, ..spec }, &cfs, &irrelevant_pool()).unwrap();
        assert_eq!(other.len(), 5);
    }

    #[test]
    fn probe_style_all_misleading_mix() {
        let item = nobel();
        let cfs = substitution_counterfactuals(&item, &["Alain Aspect".to_string()], 1).unwrap();
        let mix = build_evidence_mix(&item, &ConflictMixSpec::new(0, 3, 0, 5), &cfs, &[]).unwrap();
        assert_eq!(mix.len(), 3);
        assert!(mix.iter().all(|d| d.label == EvidenceLabel::Misleading));
    }

    #[test]
    fn mix_reports_short_label() {
        let item = nobel();
        let err = build_evidence_mix(&item, &ConflictMixSpec::new(4, 0, 0, 1), &[], &[]).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::InsufficientPool {
                label: EvidenceLabel::Truthful,
                needed: 4,
                available: 3,
                ..
            }
        ));
        let err = build_evidence_mix(&item, &ConflictMixSpec::new(1, 1, 0, 1), &[], &[]).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::InsufficientPool {
                label: EvidenceLabel::Misleading,
                ..
            }
        ));
        let err = build_evidence_mix(&item, &ConflictMixSpec::new(1, 0, 7, 1), &[], &irrelevant_pool()).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::InsufficientPool {
                label: EvidenceLabel::Irrelevant,
                available: 6,
                ..
            }
        ));
    }

    #[test]
    fn mix_spec_validation_and_ratios() {
        assert!(ConflictMixSpec::new(0, 0, 0, 1).validate().is_err());
        let bad = ConflictMixSpec {
            k: 4,
            ..ConflictMixSpec::new(1, 1, 1, 0)
        };
        assert!(bad.validate().is_err());
        let s = ConflictMixSpec::from_ratio(10, 2, 1, 0).unwrap();
        assert_eq!((s.n_truthful, s.n_misleading, s.n_irrelevant), (6, 3, 1));
        let s = ConflictMixSpec::from_ratio(10, 2, 2, 0).unwrap();
        assert_eq!((s.n_truthful, s.n_misleading, s.n_irrelevant), (5, 5, 0));
        let s = ConflictMixSpec::from_ratio(5, 0, 2, 0).unwrap();
        assert_eq!((s.n_truthful, s.n_misleading, s.n_irrelevant), (0, 5, 0));
    }

    #[test]
    fn memory_injection() {
        let item = nobel();
        let mix = build_evidence_mix(&item, &ConflictMixSpec::new(2, 0, 0, 3), &[], &[]).unwrap();
        let out = inject_memory_evidence(&mix, &item.id, "Benjamin List won the prize.", memory_label(false), 3).unwrap();
        assert_eq!(out.len(), mix.len() + 1);
        let mem = out.iter().find(|d| d.provenance == Provenance::InducedMemory).unwrap();
        assert_eq!(mem.label, EvidenceLabel::Misleading);
        let out = inject_memory_evidence(&mix, &item.id, "Pierre Agostini won.", memory_label(true), 3).unwrap();
        assert_eq!(
            out.iter().find(|d| d.provenance == Provenance::InducedMemory).unwrap().label,
            EvidenceLabel::Truthful
        );
        assert!(inject_memory_evidence(&mix, &item.id, "  ", EvidenceLabel::Truthful, 3).is_err());
    }

    fn two_hop() -> QAItem {
        QAItem {
            id: "m1".into(),
            question: "Where was the 2023 physics laureate born?".into(),
            gold_answers: vec!["Tunis".into()],
            evidence: vec![
                passage("h1", "The 2023 physics laureate is Pierre Agostini."),
                passage("h2", "Pierre Agostini was born in Tunis."),
            ],
            popularity: None,
            hops: Some(vec![
                Hop {
                    question: "Who is the 2023 physics laureate?".into(),
                    answer: "Pierre Agostini".into(),
                    evidence_id: "h1".into(),
                },
                Hop {
                    question: "Where was Pierre Agostini born?".into(),
                    answer: "Tunis".into(),
                    evidence_id: "h2".into(),
                },
            ]),
        }
    }

    #[test]
    fn multihop_counts() {
        let item = two_hop();
        let pool: Vec<String> = vec!["Alain Aspect".into(), "Paris".into()];
        let base = build_multihop_conflicts(&item, 0, &pool, 1).unwrap();
        assert_eq!(base.len(), 2);
        assert!(base.iter().all(|d| d.label == EvidenceLabel::Truthful));
        let one = build_multihop_conflicts(&item, 1, &pool, 1).unwrap();
        assert_eq!(one.len(), 3);
        assert_eq!(one.iter().filter(|d| d.label == EvidenceLabel::Truthful).count(), 2);
        let mis = &one[1];
        assert_eq!(mis.label, EvidenceLabel::Misleading);
        assert!(avoids_answers(&mis.text, &["Pierre Agostini"]));
        let all = build_multihop_conflicts(&item, 2, &pool, 1).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(
            all.iter().filter(|d| d.label == EvidenceLabel::Misleading).count(),
            all.iter().filter(|d| d.label == EvidenceLabel::Truthful).count()
        );
        assert!(matches!(
            build_multihop_conflicts(&item, 3, &pool, 1),
            Err(CorpusError::HopBudget { h: 3, hops: 2, .. })
        ));
        assert!(matches!(
            build_multihop_conflicts(&nobel(), 0, &pool, 1),
            Err(CorpusError::MissingHops { .. })
        ));
    }

    #[test]
    fn popularity_bucketing() {
        let mk = |id: &str, pop: Option<u64>| QAItem {
            id: id.into(),
            question: "q".into(),
            gold_answers: vec!["a".into()],
            evidence: vec![],
            popularity: pop,
            hops: None,
        };
        let items = vec![mk("a", Some(5_000)), mk("b", Some(50)), mk("c", None), mk("d", Some(1_000))];
        let b = popularity_buckets(&items, &DEFAULT_POPULARITY_EDGES).unwrap();
        assert_eq!(b.buckets.len(), 4);
        assert_eq!(b.buckets[1].lower, 1e3);
        let ids: Vec<&str> = b.buckets[1].items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "d"]);
        assert_eq!(b.missing, 1);
        assert_eq!(b.out_of_range, 1);
        let empty = popularity_buckets(&[], &DEFAULT_POPULARITY_EDGES).unwrap();
        assert!(empty.buckets.iter().all(|b| b.items.is_empty()));
        assert!(matches!(
            popularity_buckets(&items, &[1e3, 1e2]),
            Err(CorpusError::NonMonotoneEdges)
        ));
    }

    proptest::proptest! {
        #[test]
        fn substitution_never_leaks_gold_tokens(
            words in proptest::collection::vec(
                proptest::prop_oneof![
                    proptest::strategy::Just("Pierre"), proptest::strategy::Just("Agostini,"),
                    proptest::strategy::Just("won"), proptest::strategy::Just("(Pierre"),
                    proptest::strategy::Just("Agostini)"), proptest::strategy::Just("the"),
                    proptest::strategy::Just("prize."), proptest::strategy::Just("PIERRE")
                ], 1..12),
        ) {
            let text = words.join(" ");
            let out = substitute_mentions(&text, &["Pierre Agostini"], "Alain Aspect");
            proptest::prop_assert!(avoids_answers(&out, &["Pierre Agostini"]));
            if !avoids_answers(&text, &["Pierre Agostini"]) {
                proptest::prop_assert!(recall(&out, "Alain Aspect").unwrap() == 1.0);
            }
        }
    }
}
