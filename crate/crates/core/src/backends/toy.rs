//! In-process toy backends: an explicit context table, an add-one smoothed
//! bigram model over a whitespace vocabulary, and trivial text generators.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_tokens, BackendError, LogitProvider, LogitScale, ProviderDescriptor, TextGenerator, TokenContext, TokenId,
    Tokenizer,
};

pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Splits on whitespace and maps words through a fixed vocabulary.
///
/// Ids 0 and 1 are always `</s>` and `<unk>`.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    fingerprint: String,
}

impl WhitespaceTokenizer {
    pub fn from_vocab<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: HashMap<String, TokenId> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), vocab.len() as TokenId);
                vocab.push(w);
            }
        }
        let mut hasher = Sha256::new();
        for w in &vocab {
            hasher.update(w.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Self {
            vocab,
            index,
            fingerprint: format!("ws-{hex}"),
        }
    }

    /// Vocabulary made of every whitespace-delimited word in `text`, in first-seen order.
    pub fn from_text(text: &str) -> Self {
        Self::from_vocab(text.split_whitespace())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos(&self) -> TokenId {
        0
    }

    pub fn unk(&self) -> TokenId {
        1
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            vocab_size: self.vocab.len(),
            eos_token: self.eos(),
            tokenizer_fingerprint: self.fingerprint.clone(),
            scale: LogitScale::Logits,
        }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        Ok(text
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(self.unk()))
            .collect())
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        check_tokens(tokens, self.vocab.len())?;
        Ok(tokens
            .iter()
            .filter(|t| **t != self.eos())
            .map(|t| self.vocab[*t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Explicit context → vector map with a default for unlisted contexts.
#[derive(Debug, Clone)]
pub struct TableProvider {
    descriptor: ProviderDescriptor,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
    default: Vec<f64>,
}

impl TableProvider {
    pub fn new(descriptor: ProviderDescriptor, default: Vec<f64>) -> Result<Self, BackendError> {
        descriptor.validate()?;
        check_vector(&default, descriptor.vocab_size)?;
        Ok(Self {
            descriptor,
            table: HashMap::new(),
            default,
        })
    }

    pub fn insert(&mut self, context: Vec<TokenId>, scores: Vec<f64>) -> Result<(), BackendError> {
        check_tokens(&context, self.descriptor.vocab_size)?;
        check_vector(&scores, self.descriptor.vocab_size)?;
        self.table.insert(context, scores);
        Ok(())
    }

    pub fn with_entry(mut self, context: Vec<TokenId>, scores: Vec<f64>) -> Result<Self, BackendError> {
        self.insert(context, scores)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn from_file(file: TableFile) -> Result<Self, BackendError> {
        let mut p = Self::new(file.descriptor, file.default)?;
        for e in file.entries {
            p.insert(e.context, e.logits)?;
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Self::from_file(TableFile::read(path)?)
    }
}

fn check_vector(scores: &[f64], vocab_size: usize) -> Result<(), BackendError> {
    if scores.len() != vocab_size {
        return Err(BackendError::Usage(format!(
            "vector has {} entries, vocabulary has {vocab_size}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(BackendError::Usage("vector contains non-finite entries".into()));
    }
    Ok(())
}

impl LogitProvider for TableProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError> {
        Ok(self.table.get(&ctx.tokens).unwrap_or(&self.default).clone())
    }
}

/// JSON layout of a table provider on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableFile {
    pub descriptor: ProviderDescriptor,
    pub default: Vec<f64>,
    #[serde(default)]
    pub entries: Vec<TableEntry>,
    /// Words for ids 2.. of a matching [`WhitespaceTokenizer`]; ids 0 and 1 are implicit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

impl TableFile {
    pub fn read(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Usage(format!("cannot read table {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Usage(format!("bad table file {}: {e}", path.display())))
    }

    /// The tokenizer described by `vocab`, checked against the descriptor.
    pub fn tokenizer(&self) -> Result<Option<WhitespaceTokenizer>, BackendError> {
        let Some(words) = &self.vocab else {
            return Ok(None);
        };
        let tok = WhitespaceTokenizer::from_vocab(words.iter().cloned());
        if tok.fingerprint() != self.descriptor.tokenizer_fingerprint || tok.vocab_size() != self.descriptor.vocab_size {
            return Err(BackendError::Usage(format!(
                "table vocabulary gives fingerprint {} with {} entries, descriptor says {} with {}",
                tok.fingerprint(),
                tok.vocab_size(),
                self.descriptor.tokenizer_fingerprint,
                self.descriptor.vocab_size
            )));
        }
        Ok(Some(tok))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableEntry {
    pub context: Vec<TokenId>,
    pub logits: Vec<f64>,
}

/// Add-one smoothed bigram model: `P(w | v) = (c(v, w) + 1) / (c(v) + V)`.
///
/// Each training sequence is wrapped in `</s>` on both sides, so the empty
/// context conditions on `</s>`. Scores are natural-log probabilities.
#[derive(Debug, Clone)]
pub struct BigramProvider {
    descriptor: ProviderDescriptor,
    pair_counts: HashMap<(TokenId, TokenId), u64>,
    left_counts: Vec<u64>,
}

impl BigramProvider {
    pub fn train(descriptor: ProviderDescriptor, sequences: &[Vec<TokenId>]) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let v = descriptor.vocab_size;
        let eos = descriptor.eos_token;
        let mut pair_counts = HashMap::new();
        let mut left_counts = vec![0u64; v];
        for seq in sequences {
            check_tokens(seq, v)?;
            let padded = std::iter::once(eos).chain(seq.iter().copied()).chain(std::iter::once(eos));
            let padded: Vec<TokenId> = padded.collect();
            for w in padded.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += 1;
                left_counts[w[0] as usize] += 1;
            }
        }
        Ok(Self {
            descriptor: descriptor.with_scale(LogitScale::LogProbs),
            pair_counts,
            left_counts,
        })
    }

    /// Builds a vocabulary from `text` and trains on each non-empty line.
    pub fn from_corpus(text: &str) -> Result<(WhitespaceTokenizer, Self), BackendError> {
        let tok = WhitespaceTokenizer::from_text(text);
        Self::from_corpus_with(tok, text)
    }

    /// Trains on each non-empty line of `text` using an existing vocabulary.
    pub fn from_corpus_with(tok: WhitespaceTokenizer, text: &str) -> Result<(WhitespaceTokenizer, Self), BackendError> {
        let sequences: Vec<Vec<TokenId>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| tok.encode(l))
            .collect::<Result<_, _>>()?;
        let model = Self::train(tok.descriptor(), &sequences)?;
        Ok((tok, model))
    }

    pub fn count(&self, prev: TokenId, next: TokenId) -> u64 {
        self.pair_counts.get(&(prev, next)).copied().unwrap_or(0)
    }

    pub fn probability(&self, prev: TokenId, next: TokenId) -> f64 {
        let v = self.descriptor.vocab_size as f64;
        (self.count(prev, next) + 1) as f64 / (self.left_counts[prev as usize] as f64 + v)
    }
}

impl LogitProvider for BigramProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError> {
        let prev = ctx.tokens.last().copied().unwrap_or(self.descriptor.eos_token);
        Ok((0..self.descriptor.vocab_size as TokenId)
            .map(|next| self.probability(prev, next).ln())
            .collect())
    }
}

/// Returns the last non-empty prompt line prefixed with `echo:`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl TextGenerator for EchoGenerator {
    fn generate(&self, prompt: &str, _temperature: f64, _max_tokens: usize) -> Result<String, BackendError> {
        let last = prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        Ok(format!("echo: {}", last.trim()))
    }
}

type GenFn = dyn Fn(&str, f64, usize) -> Result<String, BackendError> + Send + Sync;

/// Generator backed by a closure.
pub struct FnGenerator(Box<GenFn>);

impl FnGenerator {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&str, f64, usize) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self(Box::new(f))
    }
}

impl TextGenerator for FnGenerator {
    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String, BackendError> {
        (self.0)(prompt, temperature, max_tokens)
    }
}
