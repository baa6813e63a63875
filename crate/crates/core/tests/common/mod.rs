#![allow(dead_code)]

use std::path::Path;

use kconflict::corpus::{Passage, QAItem};

/// Synthetic single-hop items whose answers share no tokens across items.
///
/// Item `i` has three passages naming its answer and one that does not.
pub fn synthetic_items(n: usize) -> Vec<QAItem> {
    (0..n)
        .map(|i| {
            let answer = if i % 2 == 0 {
                format!("Kar{i}")
            } else {
                format!("Vel{i} Orun{i}")
            };
            let place = format!("Place{i}");
            QAItem {
                id: format!("q{i:04}"),
                question: format!("Who founded {place} ?"),
                gold_answers: vec![answer.clone()],
                evidence: vec![
                    Passage {
                        id: format!("q{i:04}-p0"),
                        text: format!("{answer} founded {place} long ago ."),
                    },
                    Passage {
                        id: format!("q{i:04}-p1"),
                        text: format!("Records from {place} name {answer} as founder ."),
                    },
                    Passage {
                        id: format!("q{i:04}-p2"),
                        text: format!("Old maps of {place} show {answer} near the gate ."),
                    },
                    Passage {
                        id: format!("q{i:04}-p3"),
                        text: format!("{place} lies near river{i} with cold water ."),
                    },
                ],
                popularity: Some(10u64.pow(2 + (i % 4) as u32) + i as u64),
                hops: None,
            }
        })
        .collect()
}

pub fn write_dataset(path: &Path, items: &[QAItem]) {
    kconflict::jsonl::write(path, items).expect("write dataset");
}

/// Corpus for a bigram backend: every passage plus a question/answer line per item.
pub fn bigram_corpus(items: &[QAItem]) -> String {
    let mut out = String::new();
    for item in items {
        for p in &item.evidence {
            out.push_str(&p.text);
            out.push('\n');
        }
        out.push_str(&format!("Question: {} Answer: {}\n", item.question, item.gold_answers[0]));
    }
    out
}
