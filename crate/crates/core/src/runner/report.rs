use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::eval::{AggregateTable, RunReport};
use super::RunError;
use crate::probe::{GroupStats, ProbeSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}; expected json, markdown or csv")),
        }
    }
}

/// Markdown results-table columns, in order.
pub const TABLE_COLUMNS: [&str; 10] = [
    "Run", "EM", "F1", "R", "Con R", "Tru KP", "Mis KP", "Irr KP", "Corr MR", "Inco MR",
];

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "-".into())
}

fn header(columns: &[&str]) -> String {
    let mut s = format!("| {} |\n", columns.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(columns.len())));
    s
}

fn row(name: &str, a: &AggregateTable) -> String {
    let cells = [
        pct(a.em),
        pct(a.f1),
        pct(a.recall),
        pct(a.con_r),
        pct(a.tru_kp),
        pct(a.mis_kp),
        pct(a.irr_kp),
        pct(a.corr_mr),
        pct(a.inco_mr),
    ];
    format!("| {name} | {} |\n", cells.join(" | "))
}

/// The results table, in percent with two decimals; `-` marks undefined
/// columns. A run without items renders the header only.
pub fn render_markdown(report: &RunReport) -> String {
    let mut s = header(&TABLE_COLUMNS);
    if report.records.is_empty() {
        return s;
    }
    s.push_str(&row(report.config.mode.as_str(), &report.aggregate));
    s
}

/// One row per item with its metrics; failed items keep an error and empty metric cells.
pub fn render_csv(report: &RunReport) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| RunError::Config(format!("csv: {e}"));
    w.write_record([
        "item_id",
        "prediction",
        "em",
        "f1",
        "recall",
        "con_r",
        "tru_kp",
        "mis_kp",
        "irr_kp",
        "memory_correct",
        "memory_outcome",
        "n_truthful",
        "n_misleading",
        "n_irrelevant",
        "error",
    ])
    .map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.records {
        let count = |l| r.evidence.iter().filter(|d| d.label == l).count().to_string();
        use crate::corpus::EvidenceLabel::*;
        let m = r.metrics.as_ref();
        w.write_record([
            r.item_id.clone(),
            r.prediction.clone(),
            m.map(|m| (m.em as u8).to_string()).unwrap_or_default(),
            m.map(|m| m.f1.to_string()).unwrap_or_default(),
            m.map(|m| m.recall.to_string()).unwrap_or_default(),
            opt(m.and_then(|m| m.con_r)),
            opt(m.and_then(|m| m.tru_kp)),
            opt(m.and_then(|m| m.mis_kp)),
            opt(m.and_then(|m| m.irr_kp)),
            r.memory_correct.map(|b| b.to_string()).unwrap_or_default(),
            m.and_then(|m| m.memory_outcome)
                .map(|o| format!("{o:?}").to_lowercase())
                .unwrap_or_default(),
            count(Truthful),
            count(Misleading),
            count(Irrelevant),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, RunError> {
    std::fs::write(&path, text).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// Writes `report.json`, `report.md` or `items.csv` into `dir`.
pub fn emit_report(report: &RunReport, format: ReportFormat, dir: &Path) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    match format {
        ReportFormat::Json => write(
            dir.join("report.json"),
            &serde_json::to_string_pretty(report).expect("report serializes"),
        ),
        ReportFormat::Markdown => write(dir.join("report.md"), &render_markdown(report)),
        ReportFormat::Csv => write(dir.join("items.csv"), &render_csv(report)?),
    }
}

/// Probe summary as a table with memory-recall, conflict-recall and MR per memory group.
pub fn probe_markdown(name: &str, s: &ProbeSummary) -> String {
    let cols = [
        "Run",
        "Inco Mem R",
        "Inco Con R",
        "Inco MR",
        "Corr Mem R",
        "Corr Con R",
        "Corr MR",
        "IMR - CMR",
    ];
    let mut out = header(&cols);
    let g = |g: &Option<GroupStats>| match g {
        Some(g) => [pct(Some(g.mem_r)), pct(Some(g.con_r)), pct(g.mr)],
        None => ["-".into(), "-".into(), "-".into()],
    };
    let [a, b, c] = g(&s.incorrect);
    let [d, e, f] = g(&s.correct);
    out.push_str(&format!(
        "| {name} | {a} | {b} | {c} | {d} | {e} | {f} | {} |\n",
        pct(s.imr_minus_cmr)
    ));
    out
}
