//! Prompt templates. Rendering is a pure function of its inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template id {0:?}; known: {known}", known = TEMPLATE_IDS.join(", "))]
    UnknownTemplate(String),
}

pub const DEFAULT_TEMPLATE: &str = "qa-v1";
pub const TEMPLATE_IDS: [&str; 2] = ["qa-v1", "qa-instruct-v1"];

/// A solved example shown before the question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub question: String,
    pub answer: String,
}

struct Template {
    header: &'static str,
    demo: &'static str,
    evidence: &'static str,
    question: &'static str,
}

fn template(id: &str) -> Result<Template, PromptError> {
    match id {
        "qa-v1" => Ok(Template {
            header: "",
            demo: "Question: {question}\nAnswer: {answer}\n\n",
            evidence: "Evidence [{index}]: {text}\n",
            question: "Question: {question}\nAnswer:",
        }),
        "qa-instruct-v1" => Ok(Template {
            header: "Answer the question with a short phrase. Use the evidence when it is given.\n\n",
            demo: "Question: {question}\nAnswer: {answer}\n\n",
            evidence: "Evidence [{index}]: {text}\n",
            question: "Question: {question}\nAnswer:",
        }),
        other => Err(PromptError::UnknownTemplate(other.to_string())),
    }
}

/// Substitutes `{key}` placeholders in one pass, so values are never re-expanded.
fn render(pattern: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(pattern.len());
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after
            .find('}')
            .and_then(|close| values.iter().find(|(k, _)| *k == &after[..close]).map(|(_, v)| (close, v)));
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// The template's parts, for storing alongside results.
pub fn template_text(id: &str) -> Result<String, PromptError> {
    let t = template(id)?;
    Ok(format!(
        "[header]\n{}\n[demo]\n{}\n[evidence]\n{}\n[question]\n{}",
        t.header, t.demo, t.evidence, t.question
    ))
}

/// Renders demonstrations, then evidence in the given order, then the question.
pub fn build_prompt<S: AsRef<str>>(
    demos: &[Demo],
    evidence: &[S],
    question: &str,
    template_id: &str,
) -> Result<String, PromptError> {
    let t = template(template_id)?;
    let mut out = String::from(t.header);
    for d in demos {
        out.push_str(&render(t.demo, &[("question", &d.question), ("answer", &d.answer)]));
    }
    for (i, e) in evidence.iter().enumerate() {
        let index = (i + 1).to_string();
        out.push_str(&render(t.evidence, &[("index", &index), ("text", e.as_ref())]));
    }
    if !evidence.is_empty() {
        out.push('\n');
    }
    out.push_str(&render(t.question, &[("question", question)]));
    Ok(out)
}

/// Asks the model to justify an answer it gave closed-book.
pub fn evidence_prompt(question: &str, answer: &str) -> String {
    format!("Question: {question}\nAnswer: {answer}\nWrite a short passage that supports this answer.\nPassage:")
}
