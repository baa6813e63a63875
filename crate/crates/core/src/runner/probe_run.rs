use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{par_map, RunError};
use crate::corpus::{CounterfactualRecord, QAItem};
use crate::decoder::Model;
use crate::probe::{
    aggregate_probe, induce_memory, run_conflict_probe, InternalMemoryRecord, ProbeConfig, ProbeError, ProbeResult,
    ProbeSummary,
};

/// Memory records for every item that could be induced, plus `(item, error)` for the rest.
pub fn induce_all(
    items: &[QAItem],
    model: &Model,
    cfg: &ProbeConfig,
    workers: usize,
) -> Result<(Vec<InternalMemoryRecord>, Vec<(String, String)>), RunError> {
    let out = par_map(workers, items, |item| (item.id.clone(), induce_memory(item, model, cfg)))?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in out {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    records.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok((records, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub results: Vec<ProbeResult>,
    /// Input records with the conflicted confidence filled in.
    pub records: Vec<InternalMemoryRecord>,
    pub failures: Vec<(String, String)>,
    pub summary: ProbeSummary,
}

/// Probes every item that has a memory record.
pub fn probe_all(
    items: &[QAItem],
    records: &[InternalMemoryRecord],
    counterfactuals: &[CounterfactualRecord],
    model: &Model,
    cfg: &ProbeConfig,
    workers: usize,
) -> Result<ProbeRun, RunError> {
    let by_id: HashMap<&str, &InternalMemoryRecord> = records.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let mut cf_by_item: HashMap<&str, Vec<CounterfactualRecord>> = HashMap::new();
    for c in counterfactuals {
        cf_by_item.entry(c.item_id.as_str()).or_default().push(c.clone());
    }
    let out = par_map(workers, items, |item| {
        let rec = by_id
            .get(item.id.as_str())
            .ok_or_else(|| ProbeError::MissingMemory(item.id.clone()))?;
        let cfs = cf_by_item.get(item.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        run_conflict_probe(item, rec, model, cfs, cfg)
    })?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (item, r) in items.iter().zip(out) {
        match r {
            Ok(res) => results.push(res),
            Err(e) => failures.push((item.id.clone(), e.to_string())),
        }
    }
    results.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let conflicted: HashMap<&str, &ProbeResult> = results.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let mut updated = records.to_vec();
    for rec in &mut updated {
        if let Some(res) = conflicted.get(rec.item_id.as_str()) {
            rec.confidence_conflicted = Some(res.confidence_conflicted);
            rec.confidence_conflicted_per_token = Some(res.confidence_conflicted_per_token);
        }
    }
    let summary = aggregate_probe(&results);
    Ok(ProbeRun {
        results,
        records: updated,
        failures,
        summary,
    })
}
