use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    avoids_answers, build_evidence_mix, contains_answer, counterfactual_violation, load_dataset, passage_pool,
    CounterfactualRecord, EvidenceLabel, MixManifest, Provenance, QAItem,
};
use crate::jsonl;
use crate::text_metrics::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: String,
    pub item_id: Option<String>,
    pub doc_id: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}]", self.kind)?;
        if let Some(i) = &self.item_id {
            write!(f, " item {i}")?;
        }
        if let Some(d) = &self.doc_id {
            write!(f, " doc {d}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub items: usize,
    pub counterfactuals: usize,
    pub manifests: usize,
    pub violations: Vec<Violation>,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: &str, item: Option<&str>, doc: Option<&str>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind: kind.to_string(),
            item_id: item.map(String::from),
            doc_id: doc.map(String::from),
            message: message.into(),
        });
    }
}

fn typed<T: serde::de::DeserializeOwned>(vals: Vec<serde_json::Value>, kind: &str, d: &mut Diagnostics) -> Vec<T> {
    vals.into_iter()
        .enumerate()
        .filter_map(|(i, v)| match serde_json::from_value(v) {
            Ok(x) => Some(x),
            Err(e) => {
                d.push(kind, None, None, format!("record {}: {e}", i + 1));
                None
            }
        })
        .collect()
}

/// Loads the files and runs [`verify_inputs`]; unreadable files become violations.
pub fn verify_dataset(dataset: &Path, manifests: Option<&Path>, counterfactuals: Option<&Path>) -> Diagnostics {
    let mut d = Diagnostics::default();
    let items = match load_dataset(dataset) {
        Ok(items) => items,
        Err(e) => {
            d.push("dataset", None, None, format!("{}: {e}", dataset.display()));
            return d;
        }
    };
    let mut load = |path: Option<&Path>, kind: &str| -> Option<Vec<serde_json::Value>> {
        let path = path?;
        match jsonl::read::<serde_json::Value>(path) {
            Ok(v) => Some(v),
            Err(e) => {
                d.push(kind, None, None, e.to_string());
                None
            }
        }
    };
    let raw_cfs = load(counterfactuals, "counterfactuals");
    let raw_mix = load(manifests, "manifests");
    let cfs: Option<Vec<CounterfactualRecord>> = raw_cfs.map(|v| typed(v, "counterfactuals", &mut d));
    let mixes: Option<Vec<MixManifest>> = raw_mix.map(|v| typed(v, "manifests", &mut d));
    let mut out = verify_inputs(&items, mixes.as_deref().unwrap_or(&[]), cfs.as_deref());
    d.violations.append(&mut out.violations);
    out.violations = d.violations;
    out
}

/// Checks counterfactual records and mix manifests against their dataset.
///
/// When counterfactuals are supplied, each single-hop manifest without
/// injected memory evidence must also equal a fresh seeded rebuild.
pub fn verify_inputs(
    items: &[QAItem],
    manifests: &[MixManifest],
    counterfactuals: Option<&[CounterfactualRecord]>,
) -> Diagnostics {
    let mut d = Diagnostics {
        items: items.len(),
        counterfactuals: counterfactuals.map_or(0, <[_]>::len),
        manifests: manifests.len(),
        violations: Vec::new(),
    };
    let by_id: HashMap<&str, &QAItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut cf_by_item: HashMap<&str, Vec<CounterfactualRecord>> = HashMap::new();

    for c in counterfactuals.unwrap_or(&[]) {
        let Some(item) = by_id.get(c.item_id.as_str()) else {
            d.push("counterfactual", Some(&c.item_id), None, "item not in dataset");
            continue;
        };
        if let Some(why) = counterfactual_violation(c, &item.gold_answers) {
            d.push("counterfactual", Some(&c.item_id), None, why);
        }
        cf_by_item.entry(c.item_id.as_str()).or_default().push(c.clone());
    }

    for m in manifests {
        let id = m.item_id.as_str();
        let Some(item) = by_id.get(id) else {
            d.push("manifest", Some(id), None, "item not in dataset");
            continue;
        };
        if let Err(e) = m.spec.validate() {
            d.push("spec", Some(id), None, e.to_string());
        }
        for label in EvidenceLabel::ALL {
            let (want, got) = (m.spec.count(label), m.count(label));
            if want != got {
                d.push("count", Some(id), None, format!("{label}: spec says {want}, manifest has {got}"));
            }
        }
        let mut seen = HashSet::new();
        for doc in &m.docs {
            if !seen.insert(doc.id.as_str()) {
                d.push("duplicate", Some(id), Some(&doc.id), "evidence id appears twice");
            }
        }
        if let Some(c) = &m.conflict_answer {
            let cf = normalize(c);
            if item.gold_answers.iter().any(|g| normalize(g).tokens == cf.tokens) {
                d.push("conflict-answer", Some(id), None, format!("{c:?} equals a gold answer"));
            }
        }
        let conflicting_hop_answers: Vec<&str> = item
            .hops
            .iter()
            .flatten()
            .take(m.conflicting_hops.unwrap_or(0))
            .map(|h| h.answer.as_str())
            .collect();
        for doc in &m.docs {
            match doc.label {
                EvidenceLabel::Misleading => {
                    if !avoids_answers(&doc.text, &item.gold_answers) {
                        d.push("misleading-gold", Some(id), Some(&doc.id), "misleading doc contains gold-answer tokens");
                    }
                    if let Some(c) = &m.conflict_answer {
                        if !contains_answer(&doc.text, std::slice::from_ref(c)) {
                            d.push("misleading-support", Some(id), Some(&doc.id), format!("doc does not mention {c:?}"));
                        }
                    }
                }
                EvidenceLabel::Truthful => {
                    let supports_gold = contains_answer(&doc.text, &item.gold_answers);
                    let supports_hop = contains_answer(&doc.text, &conflicting_hop_answers)
                        || item.hops.iter().flatten().any(|h| h.evidence_id == doc.id);
                    if !supports_gold && !supports_hop {
                        d.push("truthful-support", Some(id), Some(&doc.id), "truthful doc does not contain a gold answer");
                    }
                }
                EvidenceLabel::Irrelevant => {
                    let mut refs: Vec<&str> = item.gold_answers.iter().map(String::as_str).collect();
                    refs.extend(m.conflict_answer.as_deref());
                    if !avoids_answers(&doc.text, &refs) {
                        d.push("irrelevant-overlap", Some(id), Some(&doc.id), "irrelevant doc mentions an answer token");
                    }
                }
            }
        }
        let injected = m.docs.iter().any(|d| d.provenance == Provenance::InducedMemory);
        if counterfactuals.is_some() && m.conflicting_hops.is_none() && !injected {
            let cfs = cf_by_item.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let pool = passage_pool(items, id);
            match build_evidence_mix(item, &m.spec, cfs, &pool) {
                Ok(docs) => {
                    let a = serde_json::to_string(&docs).expect("docs serialize");
                    let b = serde_json::to_string(&m.docs).expect("docs serialize");
                    if a != b {
                        d.push("reproducibility", Some(id), None, "manifest differs from a seeded rebuild");
                    }
                }
                Err(e) => d.push("reproducibility", Some(id), None, format!("rebuild failed: {e}")),
            }
        }
    }
    d
}
