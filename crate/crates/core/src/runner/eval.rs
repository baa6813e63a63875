use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backend::Backends;
use super::config::{ExperimentConfig, Mode};
use super::{par_map, RunError};
use crate::backends::TokenContext;
use crate::corpus::{
    answer_pool, build_manifest, load_dataset, passage_pool, rng_for, sample_eval_set, substitution_counterfactuals,
    CounterfactualRecord, EvidenceDoc, EvidenceLabel, MixManifest, Provenance, QAItem,
};
use crate::decoder::{cd2_expert_amateur, cd2_internal_external, greedy_decode, DecodeTrace, DecoderConfig, Model, StopReason};
use crate::jsonl;
use crate::probe::InternalMemoryRecord;
use crate::prompt::{build_prompt, template_text, Demo};
use crate::text_metrics::{exact_match, k_precision, max_f1, max_recall, memorization_ratio, recall, MemCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRef {
    pub id: String,
    pub label: EvidenceLabel,
    pub provenance: Provenance,
}

/// Whether a prediction under evidence kept the closed-book answer or moved
/// to an answer the evidence supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryOutcome {
    Stick,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub em: bool,
    pub f1: f64,
    pub recall: f64,
    /// Recall against the misleading evidence's answer, when there is misleading evidence.
    pub con_r: Option<f64>,
    pub tru_kp: Option<f64>,
    pub mis_kp: Option<f64>,
    pub irr_kp: Option<f64>,
    pub memory_outcome: Option<MemoryOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub prediction: String,
    pub evidence: Vec<DocRef>,
    pub conflict_answer: Option<String>,
    pub memory_answer: Option<String>,
    pub memory_correct: Option<bool>,
    pub generated_tokens: usize,
    pub stop: Option<StopReason>,
    /// Absent when the item failed.
    pub metrics: Option<ItemMetrics>,
    pub error: Option<String>,
}

impl ItemRecord {
    fn failed(item_id: &str, error: String) -> Self {
        Self {
            item_id: item_id.to_string(),
            prediction: String::new(),
            evidence: Vec::new(),
            conflict_answer: None,
            memory_answer: None,
            memory_correct: None,
            generated_tokens: 0,
            stop: None,
            metrics: None,
            error: Some(error),
        }
    }
}

/// One row of the results table. Rates are fractions in `[0, 1]`; a column
/// is absent when no item defines it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub n_items: usize,
    pub n_failed: usize,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub recall: Option<f64>,
    pub con_r: Option<f64>,
    pub tru_kp: Option<f64>,
    pub mis_kp: Option<f64>,
    pub irr_kp: Option<f64>,
    pub corr_mr: Option<f64>,
    pub inco_mr: Option<f64>,
    pub corr_counts: MemCounts,
    pub inco_counts: MemCounts,
}

fn mean<I: IntoIterator<Item = f64>>(xs: I) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Folds per-item records, in the order given, into the results table.
pub fn aggregate(records: &[ItemRecord]) -> AggregateTable {
    let ok: Vec<&ItemMetrics> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let mut corr = MemCounts::default();
    let mut inco = MemCounts::default();
    for r in records {
        let (Some(m), Some(correct)) = (&r.metrics, r.memory_correct) else {
            continue;
        };
        let counts = if correct { &mut corr } else { &mut inco };
        match m.memory_outcome {
            Some(MemoryOutcome::Stick) => counts.f_m += 1,
            Some(MemoryOutcome::Switch) => counts.f_s += 1,
            None => {}
        }
    }
    AggregateTable {
        n_items: records.len(),
        n_failed: records.len() - ok.len(),
        em: mean(ok.iter().map(|m| if m.em { 1.0 } else { 0.0 })),
        f1: mean(ok.iter().map(|m| m.f1)),
        recall: mean(ok.iter().map(|m| m.recall)),
        con_r: mean(ok.iter().filter_map(|m| m.con_r)),
        tru_kp: mean(ok.iter().filter_map(|m| m.tru_kp)),
        mis_kp: mean(ok.iter().filter_map(|m| m.mis_kp)),
        irr_kp: mean(ok.iter().filter_map(|m| m.irr_kp)),
        corr_mr: memorization_ratio(corr),
        inco_mr: memorization_ratio(inco),
        corr_counts: corr,
        inco_counts: inco,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { reason: String },
}

/// Wall-clock figures. Excluded when comparing reports for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub template: String,
    pub demos: Vec<Demo>,
    pub status: RunStatus,
    pub aggregate: AggregateTable,
    pub backend_calls: BTreeMap<String, u64>,
    pub records: Vec<ItemRecord>,
    pub timing: Timing,
}

impl RunReport {
    /// Pretty JSON without the `timing` member: equal for equal runs.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

/// Everything an item evaluation reads, prepared once per run.
pub struct EvalContext {
    pub mode: Mode,
    pub template: String,
    pub demos: Vec<Demo>,
    pub internal_demos: bool,
    pub decoder: DecoderConfig,
    pub mix: Option<crate::corpus::ConflictMixSpec>,
    pub manifests: Option<HashMap<String, MixManifest>>,
    pub counterfactuals: Option<HashMap<String, Vec<CounterfactualRecord>>>,
    pub entity_pool: Vec<String>,
    pub dataset: Vec<QAItem>,
    pub memory: HashMap<String, InternalMemoryRecord>,
    pub seed: u64,
}

/// `m` demonstrations drawn, seeded, from items outside `sample`.
pub fn held_out_demos(all: &[QAItem], sample: &[QAItem], m: usize, seed: u64) -> Result<Vec<Demo>, RunError> {
    let used: std::collections::HashSet<&str> = sample.iter().map(|i| i.id.as_str()).collect();
    let pool: Vec<&QAItem> = all.iter().filter(|i| !used.contains(i.id.as_str())).collect();
    if pool.len() < m {
        return Err(RunError::Config(format!(
            "{m} demonstrations requested but only {} items are outside the evaluation sample",
            pool.len()
        )));
    }
    let mut idx = rand::seq::index::sample(&mut rng_for(seed, "demos"), pool.len(), m).into_vec();
    idx.sort_unstable();
    Ok(idx
        .into_iter()
        .map(|i| Demo {
            question: pool[i].question.clone(),
            answer: pool[i].gold_answers[0].clone(),
        })
        .collect())
}

fn group_by_item<T, F: Fn(&T) -> &str>(values: Vec<T>, key: F) -> HashMap<String, Vec<T>> {
    let mut out: HashMap<String, Vec<T>> = HashMap::new();
    for v in values {
        out.entry(key(&v).to_string()).or_default().push(v);
    }
    out
}

/// Loads inputs named by the config. Returns the context and the evaluation sample.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(EvalContext, Vec<QAItem>), RunError> {
    let dataset = load_dataset(&cfg.dataset)?;
    let sample = sample_eval_set(&dataset, cfg.sample_size, cfg.seed)?;
    let demos = held_out_demos(&dataset, &sample, cfg.demos, cfg.seed)?;
    let counterfactuals = match &cfg.counterfactuals {
        Some(p) => Some(group_by_item(jsonl::read::<CounterfactualRecord>(p)?, |c| &c.item_id)),
        None => None,
    };
    let manifests = match &cfg.manifests {
        Some(p) => Some(
            jsonl::read::<MixManifest>(p)?
                .into_iter()
                .map(|m| (m.item_id.clone(), m))
                .collect(),
        ),
        None => None,
    };
    let memory = match &cfg.memory {
        Some(p) => jsonl::read::<InternalMemoryRecord>(p)?
            .into_iter()
            .map(|r| (r.item_id.clone(), r))
            .collect(),
        None => HashMap::new(),
    };
    let entity_pool = match &cfg.entity_pool {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => answer_pool(&dataset),
    };
    let mix = if cfg.mode.uses_evidence() && manifests.is_none() {
        Some(cfg.mix_spec()?)
    } else {
        None
    };
    let ctx = EvalContext {
        mode: cfg.mode,
        template: cfg.template.clone(),
        demos,
        internal_demos: cfg.internal_demos,
        decoder: DecoderConfig {
            alpha: cfg.alpha,
            beta: cfg.beta,
            max_len: cfg.max_len,
            top_k: cfg.top_k,
        },
        mix,
        manifests,
        counterfactuals,
        entity_pool,
        dataset,
        memory,
        seed: cfg.seed,
    };
    Ok((ctx, sample))
}

fn evidence_for(item: &QAItem, ctx: &EvalContext) -> Result<(Vec<EvidenceDoc>, Option<String>), String> {
    if !ctx.mode.uses_evidence() {
        return Ok((Vec::new(), None));
    }
    if let Some(manifests) = &ctx.manifests {
        let m = manifests
            .get(&item.id)
            .ok_or_else(|| format!("no mix manifest for item {}", item.id))?;
        return Ok((m.docs.clone(), m.conflict_answer.clone()));
    }
    let spec = ctx.mix.as_ref().expect("mix spec is resolved when manifests are absent");
    let generated;
    let cfs: &[CounterfactualRecord] = match &ctx.counterfactuals {
        Some(map) => map.get(&item.id).map(Vec::as_slice).unwrap_or(&[]),
        None if spec.n_misleading > 0 => {
            generated = substitution_counterfactuals(item, &ctx.entity_pool, ctx.seed).map_err(|e| e.to_string())?;
            &generated
        }
        None => &[],
    };
    let pool = passage_pool(&ctx.dataset, &item.id);
    let m = build_manifest(item, spec, cfs, &pool).map_err(|e| e.to_string())?;
    Ok((m.docs, m.conflict_answer))
}

fn decode(item: &QAItem, docs: &[EvidenceDoc], ctx: &EvalContext, backends: &Backends) -> Result<(DecodeTrace, Model), String> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let prompt = build_prompt(&ctx.demos, &texts, &item.question, &ctx.template).map_err(|e| e.to_string())?;
    let expert = backends.expert.as_ref().ok_or("no expert backend")?;
    let enc = |m: &Model, p: &str| -> Result<TokenContext, String> { m.encode(p).map_err(|e| e.to_string()) };
    let ectx = enc(expert, &prompt)?;
    let trace = match ctx.mode {
        Mode::ClosedBook | Mode::InContext => greedy_decode(expert.provider.as_ref(), &ectx, ctx.decoder.max_len),
        Mode::Cd2InternalExternal => {
            let internal = backends.internal.as_ref().ok_or("no internal backend")?;
            let demos: &[Demo] = if ctx.internal_demos { &ctx.demos } else { &[] };
            let iprompt = build_prompt::<&str>(demos, &[], &item.question, &ctx.template).map_err(|e| e.to_string())?;
            let ictx = enc(internal, &iprompt)?;
            cd2_internal_external(expert.provider.as_ref(), internal.provider.as_ref(), &ectx, &ictx, &ctx.decoder)
        }
        Mode::Cd2ExpertAmateur => {
            let amateur = backends.amateur.as_ref().ok_or("no amateur backend")?;
            cd2_expert_amateur(expert.provider.as_ref(), amateur.provider.as_ref(), &ectx, &ctx.decoder)
        }
    }
    .map_err(|e| e.to_string())?;
    Ok((trace, expert.clone()))
}

fn kp_for(pred: &str, docs: &[EvidenceDoc], label: EvidenceLabel) -> Option<f64> {
    let texts: Vec<&str> = docs.iter().filter(|d| d.label == label).map(|d| d.text.as_str()).collect();
    if texts.is_empty() {
        return None;
    }
    k_precision(pred, &texts).ok()
}

fn memory_outcome(
    pred: &str,
    memory_answer: &str,
    item: &QAItem,
    docs: &[EvidenceDoc],
    conflict_answer: Option<&str>,
) -> Option<MemoryOutcome> {
    if docs.is_empty() {
        return None;
    }
    if recall(pred, memory_answer).is_ok_and(|r| r >= 1.0) {
        return Some(MemoryOutcome::Stick);
    }
    let mut supported: Vec<&str> = Vec::new();
    if docs.iter().any(|d| d.label == EvidenceLabel::Truthful) {
        supported.extend(item.gold_answers.iter().map(String::as_str));
    }
    if docs.iter().any(|d| d.label == EvidenceLabel::Misleading) {
        supported.extend(conflict_answer);
    }
    supported
        .iter()
        .any(|a| recall(pred, a).is_ok_and(|r| r >= 1.0))
        .then_some(MemoryOutcome::Switch)
}

/// Runs one item end to end. Failures are recorded, never propagated.
pub fn evaluate_item(item: &QAItem, ctx: &EvalContext, backends: &Backends) -> ItemRecord {
    let (docs, conflict_answer) = match evidence_for(item, ctx) {
        Ok(x) => x,
        Err(e) => return ItemRecord::failed(&item.id, format!("evidence: {e}")),
    };
    let (trace, model) = match decode(item, &docs, ctx, backends) {
        Ok(x) => x,
        Err(e) => return ItemRecord::failed(&item.id, format!("decode: {e}")),
    };
    let prediction = match model.decode(&trace.tokens) {
        Ok(t) => t.lines().next().unwrap_or("").trim().to_string(),
        Err(e) => return ItemRecord::failed(&item.id, format!("detokenize: {e}")),
    };
    let memory = ctx.memory.get(&item.id);
    let metrics = ItemMetrics {
        em: exact_match(&prediction, &item.gold_answers).unwrap_or(false),
        f1: max_f1(&prediction, &item.gold_answers),
        recall: max_recall(&prediction, &item.gold_answers).unwrap_or(0.0),
        con_r: conflict_answer.as_deref().map(|c| recall(&prediction, c).unwrap_or(0.0)),
        tru_kp: kp_for(&prediction, &docs, EvidenceLabel::Truthful),
        mis_kp: kp_for(&prediction, &docs, EvidenceLabel::Misleading),
        irr_kp: kp_for(&prediction, &docs, EvidenceLabel::Irrelevant),
        memory_outcome: memory
            .and_then(|m| memory_outcome(&prediction, &m.memory_answer, item, &docs, conflict_answer.as_deref())),
    };
    ItemRecord {
        item_id: item.id.clone(),
        prediction,
        evidence: docs
            .iter()
            .map(|d| DocRef {
                id: d.id.clone(),
                label: d.label,
                provenance: d.provenance,
            })
            .collect(),
        conflict_answer,
        memory_answer: memory.map(|m| m.memory_answer.clone()),
        memory_correct: memory.map(|m| m.is_correct),
        generated_tokens: trace.tokens.len(),
        stop: Some(trace.stop),
        metrics: Some(metrics),
        error: None,
    }
}

/// Evaluates `items` on `workers` threads and assembles the report in item-id order.
pub fn run_items(
    cfg: &ExperimentConfig,
    ctx: &EvalContext,
    items: &[QAItem],
    backends: &Backends,
) -> Result<RunReport, RunError> {
    let start = Instant::now();
    let mut records = par_map(cfg.workers, items, |item| evaluate_item(item, ctx, backends))?;
    records.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let aggregate = aggregate(&records);
    let failed = aggregate.n_failed;
    let status = if records.is_empty() || (failed as f64) <= cfg.failure_ceiling * records.len() as f64 {
        RunStatus::Completed
    } else {
        RunStatus::Aborted {
            reason: format!(
                "{failed} of {} items failed, above the ceiling of {}",
                records.len(),
                cfg.failure_ceiling
            ),
        }
    };
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::warn!("item {} failed: {}", r.item_id, r.error.as_deref().unwrap_or(""));
    }
    Ok(RunReport {
        config: cfg.clone(),
        template: template_text(&cfg.template).map_err(|e| RunError::Config(e.to_string()))?,
        demos: ctx.demos.clone(),
        status,
        aggregate,
        backend_calls: backends.call_counts(),
        records,
        timing: Timing {
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// Validates the config, connects the backends and evaluates the sample.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    let (ctx, items) = prepare(cfg)?;
    let backends = Backends::connect(&cfg.backends)?;
    run_items(cfg, &ctx, &items, &backends)
}
