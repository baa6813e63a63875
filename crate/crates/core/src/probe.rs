//! Closed-book memory induction, crosswise conflict probes and the
//! statistics derived from them: per-group recall and memorization ratio,
//! confidence pairs per behavior category, and recall by entity popularity.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{sequence_log_likelihood, BackendError, TokenContext, TokenId};
use crate::corpus::{
    build_evidence_mix, popularity_buckets, ConflictMixSpec, CorpusError, CounterfactualRecord, QAItem,
};
use crate::decoder::{greedy_decode, DecodeError, Model};
use crate::prompt::{build_prompt, evidence_prompt, Demo, PromptError, DEFAULT_TEMPLATE};
use crate::text_metrics::{
    classify_behavior, exact_match, memorization_ratio, recall, BehaviorCategory, MemCounts,
};

/// Which part of the answer the confidence scores cover.
pub const CONFIDENCE_SCOPE: &str = "answer_span";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Answer,
    Evidence,
    Conflict,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Answer => "answer",
            Phase::Evidence => "evidence",
            Phase::Conflict => "conflict",
        })
    }
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("item {item}, {phase} phase: {source}")]
    Decode {
        item: String,
        phase: Phase,
        #[source]
        source: DecodeError,
    },
    #[error("item {item}, {phase} phase: {source}")]
    Backend {
        item: String,
        phase: Phase,
        #[source]
        source: BackendError,
    },
    #[error("item {0}: memory is correct but no counterfactual record exists")]
    MissingCounterfactual(String),
    #[error("item {0}: no memory record")]
    MissingMemory(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub demos: Vec<Demo>,
    pub template: String,
    pub max_answer_len: usize,
    pub max_evidence_len: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            demos: Vec::new(),
            template: DEFAULT_TEMPLATE.to_string(),
            max_answer_len: 32,
            max_evidence_len: 64,
            k: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalMemoryRecord {
    pub item_id: String,
    pub memory_answer: String,
    pub memory_evidence: String,
    pub is_correct: bool,
    /// Summed log-likelihood of the answer tokens under the closed-book prompt.
    pub confidence_closed: f64,
    pub confidence_closed_per_token: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_conflicted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_conflicted_per_token: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub item_id: String,
    pub prediction: String,
    pub memory_answer: String,
    /// The answer the supplied evidence supports.
    pub conflict_answer: String,
    pub is_correct: bool,
    pub mem_r: f64,
    pub con_r: f64,
    pub category: BehaviorCategory,
    pub confidence_conflicted: f64,
    pub confidence_conflicted_per_token: f64,
    pub evidence_ids: Vec<String>,
}

struct Decoded {
    text: String,
    tokens: Vec<TokenId>,
    prompt: TokenContext,
}

fn decode_answer(model: &Model, prompt: &str, max_len: usize, item: &str, phase: Phase) -> Result<Decoded, ProbeError> {
    let ctx = model.encode(prompt).map_err(|source| ProbeError::Backend {
        item: item.to_string(),
        phase,
        source,
    })?;
    let trace = greedy_decode(model.provider.as_ref(), &ctx, max_len).map_err(|source| ProbeError::Decode {
        item: item.to_string(),
        phase,
        source,
    })?;
    let text = model.decode(&trace.tokens).map_err(|source| ProbeError::Backend {
        item: item.to_string(),
        phase,
        source,
    })?;
    let text = text.lines().next().unwrap_or("").trim().to_string();
    Ok(Decoded {
        text,
        tokens: trace.tokens,
        prompt: ctx,
    })
}

/// Summed and per-token log-likelihood of the decoded tokens. An empty answer
/// is scored as the immediate end-of-sequence it was.
fn confidence(model: &Model, d: &Decoded, item: &str, phase: Phase) -> Result<(f64, f64), ProbeError> {
    let span: Vec<TokenId> = if d.tokens.is_empty() { vec![model.eos()] } else { d.tokens.clone() };
    let ll = sequence_log_likelihood(model.provider.as_ref(), &d.prompt, &span).map_err(|source| {
        ProbeError::Backend {
            item: item.to_string(),
            phase,
            source,
        }
    })?;
    Ok((ll, ll / span.len() as f64))
}

/// Closed-book answer, the model's own supporting passage for it, and its confidence.
pub fn induce_memory(item: &QAItem, model: &Model, cfg: &ProbeConfig) -> Result<InternalMemoryRecord, ProbeError> {
    let prompt = build_prompt::<&str>(&cfg.demos, &[], &item.question, &cfg.template)?;
    let answer = decode_answer(model, &prompt, cfg.max_answer_len, &item.id, Phase::Answer)?;
    let (confidence_closed, confidence_closed_per_token) = confidence(model, &answer, &item.id, Phase::Answer)?;
    let evidence = decode_answer(
        model,
        &evidence_prompt(&item.question, &answer.text),
        cfg.max_evidence_len,
        &item.id,
        Phase::Evidence,
    )?;
    Ok(InternalMemoryRecord {
        item_id: item.id.clone(),
        is_correct: exact_match(&answer.text, &item.gold_answers).unwrap_or(false),
        memory_answer: answer.text,
        memory_evidence: evidence.text,
        confidence_closed,
        confidence_closed_per_token,
        confidence_conflicted: None,
        confidence_conflicted_per_token: None,
    })
}

fn recall_or_zero(pred: &str, reference: &str) -> f64 {
    recall(pred, reference).unwrap_or(0.0)
}

/// Answers the question again with `cfg.k` docs that contradict the memory:
/// truthful docs when the memory is wrong, counterfactual docs when it is right.
pub fn run_conflict_probe(
    item: &QAItem,
    record: &InternalMemoryRecord,
    model: &Model,
    counterfactuals: &[CounterfactualRecord],
    cfg: &ProbeConfig,
) -> Result<ProbeResult, ProbeError> {
    let own: Vec<CounterfactualRecord> = counterfactuals.iter().filter(|c| c.item_id == item.id).cloned().collect();
    let spec = if record.is_correct {
        if own.is_empty() {
            return Err(ProbeError::MissingCounterfactual(item.id.clone()));
        }
        ConflictMixSpec::new(0, cfg.k, 0, cfg.seed)
    } else {
        ConflictMixSpec::new(cfg.k, 0, 0, cfg.seed)
    };
    let docs = build_evidence_mix(item, &spec, &own, &[])?;
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let prompt = build_prompt(&cfg.demos, &texts, &item.question, &cfg.template)?;
    let decoded = decode_answer(model, &prompt, cfg.max_answer_len, &item.id, Phase::Conflict)?;
    let (conf, conf_per_token) = confidence(model, &decoded, &item.id, Phase::Conflict)?;
    let pred = decoded.text;

    let (conflict_answer, con_r) = if record.is_correct {
        let a = own[0].counterfactual_answer.clone();
        let r = recall_or_zero(&pred, &a);
        (a, r)
    } else {
        let mut best = (item.gold_answers[0].clone(), recall_or_zero(&pred, &item.gold_answers[0]));
        for g in &item.gold_answers[1..] {
            let r = recall_or_zero(&pred, g);
            if r > best.1 {
                best = (g.clone(), r);
            }
        }
        best
    };
    let category = classify_behavior(&pred, &record.memory_answer, &item.gold_answers, &conflict_answer, 1.0);
    Ok(ProbeResult {
        item_id: item.id.clone(),
        mem_r: recall_or_zero(&pred, &record.memory_answer),
        con_r,
        prediction: pred,
        memory_answer: record.memory_answer.clone(),
        conflict_answer,
        is_correct: record.is_correct,
        category,
        confidence_conflicted: conf,
        confidence_conflicted_per_token: conf_per_token,
        evidence_ids: docs.into_iter().map(|d| d.id).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mem_r: f64,
    pub con_r: f64,
    pub counts: MemCounts,
    /// Absent when the group has no sustain or change predictions.
    pub mr: Option<f64>,
    pub other: usize,
    pub categories: BTreeMap<BehaviorCategory, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub incorrect: Option<GroupStats>,
    pub correct: Option<GroupStats>,
    pub imr_minus_cmr: Option<f64>,
    pub confidence_scope: String,
}

/// Sustain categories count toward `f_m`, change categories toward `f_s`.
pub fn category_counts<'a, I: IntoIterator<Item = &'a BehaviorCategory>>(categories: I) -> MemCounts {
    let mut c = MemCounts::default();
    for cat in categories {
        if cat.is_sustain() {
            c.f_m += 1;
        } else if cat.is_change() {
            c.f_s += 1;
        }
    }
    c
}

fn group_stats(results: &[&ProbeResult]) -> Option<GroupStats> {
    if results.is_empty() {
        return None;
    }
    let n = results.len();
    let counts = category_counts(results.iter().map(|r| &r.category));
    let mut categories = BTreeMap::new();
    for r in results {
        *categories.entry(r.category).or_insert(0) += 1;
    }
    Some(GroupStats {
        n,
        mem_r: results.iter().map(|r| r.mem_r).sum::<f64>() / n as f64,
        con_r: results.iter().map(|r| r.con_r).sum::<f64>() / n as f64,
        counts,
        mr: memorization_ratio(counts),
        other: categories.get(&BehaviorCategory::Other).copied().unwrap_or(0),
        categories,
    })
}

/// MR of the incorrect-memory group minus MR of the correct-memory group.
pub fn imr_minus_cmr(incorrect: MemCounts, correct: MemCounts) -> Option<f64> {
    Some(memorization_ratio(incorrect)? - memorization_ratio(correct)?)
}

pub fn aggregate_probe(results: &[ProbeResult]) -> ProbeSummary {
    let inco: Vec<&ProbeResult> = results.iter().filter(|r| !r.is_correct).collect();
    let corr: Vec<&ProbeResult> = results.iter().filter(|r| r.is_correct).collect();
    let incorrect = group_stats(&inco);
    let correct = group_stats(&corr);
    let imr_minus_cmr = match (&incorrect, &correct) {
        (Some(i), Some(c)) => imr_minus_cmr(i.counts, c.counts),
        _ => None,
    };
    ProbeSummary {
        incorrect,
        correct,
        imr_minus_cmr,
        confidence_scope: CONFIDENCE_SCOPE.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    pub item_id: String,
    pub closed: f64,
    pub conflicted: f64,
    pub closed_per_token: f64,
    pub conflicted_per_token: f64,
}

/// Closed-book and conflicted confidence per behavior category. Every
/// category is present, possibly with an empty series.
pub fn confidence_deltas(
    records: &[InternalMemoryRecord],
    results: &[ProbeResult],
) -> BTreeMap<BehaviorCategory, Vec<ConfidencePair>> {
    let by_id: BTreeMap<&str, &InternalMemoryRecord> = records.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let mut out: BTreeMap<BehaviorCategory, Vec<ConfidencePair>> =
        BehaviorCategory::ALL.iter().map(|c| (*c, Vec::new())).collect();
    for res in results {
        let Some(rec) = by_id.get(res.item_id.as_str()) else {
            continue;
        };
        out.entry(res.category).or_default().push(ConfidencePair {
            item_id: res.item_id.clone(),
            closed: rec.confidence_closed,
            conflicted: res.confidence_conflicted,
            closed_per_token: rec.confidence_closed_per_token,
            conflicted_per_token: res.confidence_conflicted_per_token,
        });
    }
    out
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ProbeError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| ProbeError::Csv {
            path: path.display().to_string(),
            source: e.into(),
        })?;
    }
    csv::Writer::from_path(path).map_err(|source| ProbeError::Csv {
        path: path.display().to_string(),
        source,
    })
}

/// Columns: `category,item_id,confidence_closed,confidence_conflicted,
/// closed_per_token,conflicted_per_token,delta`, one row per probed item.
pub fn write_confidence_csv(
    path: &Path,
    deltas: &BTreeMap<BehaviorCategory, Vec<ConfidencePair>>,
) -> Result<usize, ProbeError> {
    let err = |source| ProbeError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record([
        "category",
        "item_id",
        "confidence_closed",
        "confidence_conflicted",
        "closed_per_token",
        "conflicted_per_token",
        "delta",
    ])
    .map_err(err)?;
    let mut rows = 0;
    for (cat, pairs) in deltas {
        for p in pairs {
            w.write_record([
                cat.as_str().to_string(),
                p.item_id.clone(),
                p.closed.to_string(),
                p.conflicted.to_string(),
                p.closed_per_token.to_string(),
                p.conflicted_per_token.to_string(),
                (p.conflicted - p.closed).to_string(),
            ])
            .map_err(err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| err(e.into()))?;
    Ok(rows)
}

/// A prediction and the references it is compared with on the popularity axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveObservation {
    pub item_id: String,
    pub prediction: String,
    pub conflict_answer: Option<String>,
    pub memory_answer: Option<String>,
}

impl From<&ProbeResult> for CurveObservation {
    fn from(r: &ProbeResult) -> Self {
        Self {
            item_id: r.item_id.clone(),
            prediction: r.prediction.clone(),
            conflict_answer: Some(r.conflict_answer.clone()),
            memory_answer: Some(r.memory_answer.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    /// Mean recall against the gold answers.
    pub gold: f64,
    /// Mean recall against the conflicting answer, over items that have one.
    pub conflict: Option<f64>,
    /// Mean recall against the closed-book answer, over items that have one.
    pub memory: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityCurves {
    pub rows: Vec<CurveRow>,
    pub empty_buckets: usize,
    pub missing_popularity: usize,
    pub out_of_range: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn popularity_curves(
    items: &[QAItem],
    observations: &[CurveObservation],
    edges: &[f64],
) -> Result<PopularityCurves, ProbeError> {
    let by_id: BTreeMap<&str, &CurveObservation> = observations.iter().map(|o| (o.item_id.as_str(), o)).collect();
    let observed: Vec<QAItem> = items.iter().filter(|i| by_id.contains_key(i.id.as_str())).cloned().collect();
    let buckets = popularity_buckets(&observed, edges)?;
    let mut rows = Vec::new();
    let mut empty_buckets = 0;
    for b in &buckets.buckets {
        if b.items.is_empty() {
            empty_buckets += 1;
            continue;
        }
        let (mut gold, mut conflict, mut memory) = (Vec::new(), Vec::new(), Vec::new());
        for item in &b.items {
            let o = by_id[item.id.as_str()];
            gold.push(
                item.gold_answers
                    .iter()
                    .map(|g| recall_or_zero(&o.prediction, g))
                    .fold(0.0, f64::max),
            );
            if let Some(c) = &o.conflict_answer {
                conflict.push(recall_or_zero(&o.prediction, c));
            }
            if let Some(m) = &o.memory_answer {
                memory.push(recall_or_zero(&o.prediction, m));
            }
        }
        rows.push(CurveRow {
            lower: b.lower,
            upper: b.upper,
            n: b.items.len(),
            gold: mean(&gold).unwrap_or(0.0),
            conflict: mean(&conflict),
            memory: mean(&memory),
        });
    }
    if empty_buckets > 0 {
        log::info!("{empty_buckets} popularity bucket(s) had no items and were omitted");
    }
    Ok(PopularityCurves {
        rows,
        empty_buckets,
        missing_popularity: buckets.missing,
        out_of_range: buckets.out_of_range,
    })
}

/// Columns: `lower,upper,n,gold_recall,conflict_recall,memory_recall`; an
/// empty cell means no item in the bucket had that reference.
pub fn write_popularity_csv(path: &Path, curves: &PopularityCurves) -> Result<(), ProbeError> {
    let err = |source| ProbeError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(["lower", "upper", "n", "gold_recall", "conflict_recall", "memory_recall"])
        .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &curves.rows {
        w.write_record([
            r.lower.to_string(),
            r.upper.to_string(),
            r.n.to_string(),
            r.gold.to_string(),
            opt(r.conflict),
            opt(r.memory),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{LogitProvider, ProviderDescriptor, Tokenizer, WhitespaceTokenizer};
    use crate::corpus::{substitution_counterfactuals, Passage, DEFAULT_POPULARITY_EDGES};
    use std::collections::HashMap;
    use std::sync::Arc;

    /// Scores depend on the last context token only.
    struct LastToken {
        desc: ProviderDescriptor,
        table: HashMap<TokenId, Vec<f64>>,
        default: Vec<f64>,
    }

    impl LogitProvider for LastToken {
        fn descriptor(&self) -> &ProviderDescriptor {
            &self.desc
        }

        fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError> {
            let last = ctx.tokens.last().copied().unwrap_or(0);
            Ok(self.table.get(&last).unwrap_or(&self.default).clone())
        }
    }

    const WORDS: [&str; 6] = ["Answer:", "Passage:", "List", "Agostini", "Aspect", "won"];

    /// After `Answer:` the model says `answer_word`; after any answer word it stops.
    fn model(answer_word: &str, after_passage: &str) -> (Model, Arc<WhitespaceTokenizer>) {
        let tok = Arc::new(WhitespaceTokenizer::from_vocab(WORDS));
        let v = tok.vocab_size();
        let id = |w: &str| tok.id(w).unwrap();
        let peaked = |w: &str, h: f64| {
            let mut s = vec![0.0; v];
            s[id(w) as usize] = h;
            s
        };
        let mut stop = vec![0.0; v];
        stop[0] = 5.0;
        let mut table = HashMap::new();
        table.insert(id("Answer:"), peaked(answer_word, 2.0));
        table.insert(id("Passage:"), peaked(after_passage, 3.0));
        for w in ["List", "Agostini", "Aspect", "won"] {
            table.insert(id(w), stop.clone());
        }
        let provider = LastToken {
            desc: tok.descriptor(),
            table,
            default: stop,
        };
        let m = Model::new(Arc::new(provider), tok.clone()).unwrap();
        (m, tok)
    }

    fn item() -> QAItem {
        let p = |id: &str, t: &str| Passage {
            id: id.into(),
            text: t.into(),
        };
        QAItem {
            id: "q1".into(),
            question: "Who won the 2023 Nobel Prize in Physics?".into(),
            gold_answers: vec!["Agostini".into()],
            evidence: vec![
                p("e1", "Agostini won the 2023 prize."),
                p("e2", "The laureate was Agostini."),
                p("e3", "Agostini won for attosecond work."),
            ],
            popularity: Some(500),
            hops: None,
        }
    }

    #[test]
    fn memory_incorrect_and_confidence_matches_log_softmax() {
        let (m, tok) = model("List", "List");
        let rec = induce_memory(&item(), &m, &ProbeConfig::default()).unwrap();
        assert_eq!(rec.memory_answer, "List");
        assert!(!rec.is_correct);
        assert_eq!(rec.memory_evidence, "List");
        // log softmax of a vector with one entry at 2 and the rest at 0
        let v = tok.vocab_size() as f64;
        let expected = 2.0 - ((v - 1.0) + 2f64.exp()).ln();
        assert!((rec.confidence_closed - expected).abs() < 1e-12);
        assert_eq!(rec.confidence_closed, rec.confidence_closed_per_token);
        assert!(rec.confidence_closed <= 0.0);
    }

    #[test]
    fn memory_correct_when_gold_emitted() {
        let (m, _) = model("Agostini", "won");
        let rec = induce_memory(&item(), &m, &ProbeConfig::default()).unwrap();
        assert!(rec.is_correct);
        assert_eq!(rec.memory_evidence, "won");
    }

    #[test]
    fn incorrect_memory_sustained() {
        let (m, _) = model("List", "List");
        let it = item();
        let cfg = ProbeConfig::default();
        let rec = induce_memory(&it, &m, &cfg).unwrap();
        let res = run_conflict_probe(&it, &rec, &m, &[], &cfg).unwrap();
        assert_eq!(res.category, BehaviorCategory::SustainInco);
        assert_eq!(res.mem_r, 1.0);
        assert_eq!(res.con_r, 0.0);
        assert_eq!(res.conflict_answer, "Agostini");
        assert_eq!(res.evidence_ids.len(), 3);
    }

    #[test]
    fn correct_memory_needs_counterfactual() {
        let (m, _) = model("Agostini", "won");
        let it = item();
        let cfg = ProbeConfig::default();
        let rec = induce_memory(&it, &m, &cfg).unwrap();
        match run_conflict_probe(&it, &rec, &m, &[], &cfg) {
            Err(ProbeError::MissingCounterfactual(id)) => assert_eq!(id, "q1"),
            other => panic!("unexpected {other:?}"),
        }
        let cfs = substitution_counterfactuals(&it, &["Aspect".to_string()], 0).unwrap();
        let res = run_conflict_probe(&it, &rec, &m, &cfs, &cfg).unwrap();
        assert_eq!(res.category, BehaviorCategory::SustainCorr);
        assert_eq!(res.conflict_answer, "Aspect");
    }

    #[test]
    fn follows_counterfactual() {
        // memory correct, model under conflict says the counterfactual answer
        let (m, _) = model("Aspect", "won");
        let it = item();
        let rec = InternalMemoryRecord {
            item_id: "q1".into(),
            memory_answer: "Agostini".into(),
            memory_evidence: "Agostini won.".into(),
            is_correct: true,
            confidence_closed: -0.1,
            confidence_closed_per_token: -0.1,
            confidence_conflicted: None,
            confidence_conflicted_per_token: None,
        };
        let cfs = substitution_counterfactuals(&it, &["Aspect".to_string()], 0).unwrap();
        let res = run_conflict_probe(&it, &rec, &m, &cfs, &ProbeConfig::default()).unwrap();
        assert_eq!(res.category, BehaviorCategory::ChangeCorr);
        assert_eq!(res.con_r, 1.0);
        assert_eq!(res.mem_r, 0.0);
    }

    fn result(id: &str, correct: bool, cat: BehaviorCategory, mem_r: f64, con_r: f64) -> ProbeResult {
        ProbeResult {
            item_id: id.into(),
            prediction: String::new(),
            memory_answer: String::new(),
            conflict_answer: String::new(),
            is_correct: correct,
            mem_r,
            con_r,
            category: cat,
            confidence_conflicted: -1.0,
            confidence_conflicted_per_token: -1.0,
            evidence_ids: vec![],
        }
    }

    #[test]
    fn one_stick_three_switch() {
        use BehaviorCategory::*;
        let rs = vec![
            result("a", false, SustainInco, 1.0, 0.0),
            result("b", false, ChangeInco, 0.0, 1.0),
            result("c", false, ChangeInco, 0.0, 1.0),
            result("d", false, ChangeInco, 0.0, 1.0),
        ];
        let s = aggregate_probe(&rs);
        let g = s.incorrect.unwrap();
        assert_eq!(g.mr, Some(0.25));
        assert_eq!(g.mem_r, 0.25);
        assert_eq!(g.con_r, 0.75);
        assert!(s.correct.is_none());
        assert!(s.imr_minus_cmr.is_none());
    }

    #[test]
    fn identical_groups_and_all_switch() {
        use BehaviorCategory::*;
        let rs = vec![
            result("a", false, ChangeInco, 0.0, 1.0),
            result("b", true, ChangeCorr, 0.0, 1.0),
            result("c", true, Other, 0.0, 0.0),
        ];
        let s = aggregate_probe(&rs);
        assert_eq!(s.incorrect.as_ref().unwrap().mr, Some(0.0));
        assert_eq!(s.incorrect.as_ref().unwrap().con_r, 1.0);
        let c = s.correct.unwrap();
        assert_eq!(c.mr, Some(0.0));
        assert_eq!(c.other, 1);
        assert_eq!(c.counts.total(), 1);
        assert_eq!(s.imr_minus_cmr, Some(0.0));
    }

    #[test]
    fn confidence_pairs_by_category() {
        use BehaviorCategory::*;
        let rec = |id: &str, c: f64| InternalMemoryRecord {
            item_id: id.into(),
            memory_answer: "x".into(),
            memory_evidence: "x".into(),
            is_correct: false,
            confidence_closed: c,
            confidence_closed_per_token: c / 2.0,
            confidence_conflicted: None,
            confidence_conflicted_per_token: None,
        };
        let d = confidence_deltas(
            &[rec("a", -0.5), rec("b", -2.0)],
            &[result("a", false, SustainInco, 1.0, 0.0), result("b", false, ChangeInco, 0.0, 1.0)],
        );
        assert_eq!(d.len(), 5);
        assert!(d[&SustainCorr].is_empty());
        assert_eq!(d[&SustainInco][0].closed, -0.5);
        assert_eq!(d[&ChangeInco][0].conflicted, -1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conf.csv");
        assert_eq!(write_confidence_csv(&path, &d).unwrap(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("category,item_id,confidence_closed"));
    }

    #[test]
    fn curves_follow_conflict_answers() {
        let mut items = vec![item()];
        let mut second = item();
        second.id = "q2".into();
        second.popularity = Some(900);
        items.push(second);
        let obs: Vec<CurveObservation> = ["q1", "q2"]
            .iter()
            .map(|id| CurveObservation {
                item_id: id.to_string(),
                prediction: "Aspect".into(),
                conflict_answer: Some("Aspect".into()),
                memory_answer: Some("Agostini".into()),
            })
            .collect();
        let c = popularity_curves(&items, &obs, &DEFAULT_POPULARITY_EDGES).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.rows[0].n, 2);
        assert_eq!(c.rows[0].conflict, Some(1.0));
        assert_eq!(c.rows[0].gold, 0.0);
        assert_eq!(c.rows[0].memory, Some(0.0));
        assert_eq!(c.empty_buckets, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pop.csv");
        write_popularity_csv(&path, &c).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn answer_phase_errors_are_tagged() {
        struct Broken(ProviderDescriptor);
        impl LogitProvider for Broken {
            fn descriptor(&self) -> &ProviderDescriptor {
                &self.0
            }
            fn logits(&self, _: &TokenContext) -> Result<Vec<f64>, BackendError> {
                Err(BackendError::Protocol("boom".into()))
            }
        }
        let tok = Arc::new(WhitespaceTokenizer::from_vocab(WORDS));
        let m = Model::new(Arc::new(Broken(tok.descriptor())), tok.clone() as Arc<dyn Tokenizer>).unwrap();
        match induce_memory(&item(), &m, &ProbeConfig::default()) {
            Err(ProbeError::Decode { phase, .. }) => assert_eq!(phase, Phase::Answer),
            other => panic!("unexpected {other:?}"),
        }
    }
}
