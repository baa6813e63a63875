//! Language-model backends.
//!
//! A [`LogitProvider`] maps a full token context to one score per vocabulary
//! entry. Providers are stateless after construction, so the same context
//! always yields the same vector for the toy providers and any number of
//! threads may query a provider at once. [`TextGenerator`]s produce free text
//! and are used only for counterfactual distillation. A [`Tokenizer`] turns
//! prompt text into token ids; its fingerprint must match the provider's.

mod remote;
mod server;
mod toy;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{RemoteClient, RemoteGenerator, RemoteOptions, RemoteProvider, RemoteTokenizer};
pub use server::{MockServer, ServedBackend};
pub use toy::{
    BigramProvider, EchoGenerator, FnGenerator, TableEntry, TableFile, TableProvider, WhitespaceTokenizer, EOS_TOKEN,
    UNK_TOKEN,
};

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab { token: TokenId, vocab_size: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("transport error talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("backend {endpoint} returned status {status}: {message}")]
    Remote {
        endpoint: String,
        status: u16,
        message: String,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Whether a provider emits raw logits or log-probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    #[default]
    Logits,
    LogProbs,
}

impl LogitScale {
    fn is_logits(&self) -> bool {
        *self == LogitScale::Logits
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub vocab_size: usize,
    pub eos_token: TokenId,
    pub tokenizer_fingerprint: String,
    /// Omitted on the wire when the provider emits raw logits.
    #[serde(default, skip_serializing_if = "LogitScale::is_logits")]
    pub scale: LogitScale,
}

impl ProviderDescriptor {
    pub fn new(vocab_size: usize, eos_token: TokenId, fingerprint: impl Into<String>) -> Result<Self, BackendError> {
        let d = Self {
            vocab_size,
            eos_token,
            tokenizer_fingerprint: fingerprint.into(),
            scale: LogitScale::Logits,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_scale(mut self, scale: LogitScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.vocab_size == 0 {
            return Err(BackendError::Protocol("vocab_size must be positive".into()));
        }
        if self.eos_token as usize >= self.vocab_size {
            return Err(BackendError::Protocol(format!(
                "eos_token {} not below vocab_size {}",
                self.eos_token, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Two providers can be combined only when they share vocabulary, eos and tokenizer.
pub fn compatible(a: &ProviderDescriptor, b: &ProviderDescriptor) -> bool {
    a.vocab_size == b.vocab_size && a.eos_token == b.eos_token && a.tokenizer_fingerprint == b.tokenizer_fingerprint
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub scores: Vec<f64>,
}

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, BackendError> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(BackendError::Protocol(format!("non-finite score at index {i}")));
        }
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Log-softmax of the scores, computed with a max shift.
    pub fn log_softmax(&self) -> Vec<f64> {
        let max = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        self.scores.iter().map(|s| s - lse).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenContext {
    pub tokens: Vec<TokenId>,
}

impl TokenContext {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn push(&mut self, token: TokenId) {
        self.tokens.push(token);
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<(), BackendError> {
        check_tokens(&self.tokens, vocab_size)
    }
}

impl From<Vec<TokenId>> for TokenContext {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }
}

fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<(), BackendError> {
    match tokens.iter().find(|t| **t as usize >= vocab_size) {
        Some(&token) => Err(BackendError::OutOfVocab { token, vocab_size }),
        None => Ok(()),
    }
}

pub trait LogitProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Scores for the next token. Callers should go through [`next_logits`],
    /// which validates the context and the returned vector.
    fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for Arc<P> {
    fn descriptor(&self) -> &ProviderDescriptor {
        (**self).descriptor()
    }

    fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError> {
        (**self).logits(ctx)
    }
}

/// Validated next-token scores from `provider` given the full context.
pub fn next_logits<P: LogitProvider + ?Sized>(provider: &P, ctx: &TokenContext) -> Result<LogitVector, BackendError> {
    let desc = provider.descriptor();
    ctx.check_vocab(desc.vocab_size)?;
    let scores = provider.logits(ctx)?;
    if scores.len() != desc.vocab_size {
        return Err(BackendError::Protocol(format!(
            "expected {} logits, got {}",
            desc.vocab_size,
            scores.len()
        )));
    }
    LogitVector::new(scores)
}

/// Sum over answer positions of `log softmax(next_logits)[token]`, appending
/// each answer token to the context before scoring the next one.
pub fn sequence_log_likelihood<P: LogitProvider + ?Sized>(
    provider: &P,
    ctx: &TokenContext,
    answer_tokens: &[TokenId],
) -> Result<f64, BackendError> {
    if answer_tokens.is_empty() {
        return Err(BackendError::Usage("answer_tokens must be non-empty".into()));
    }
    check_tokens(answer_tokens, provider.descriptor().vocab_size)?;
    let mut ctx = ctx.clone();
    let mut total = 0.0;
    for &tok in answer_tokens {
        let lp = next_logits(provider, &ctx)?.log_softmax();
        total += lp[tok as usize];
        ctx.push(tok);
    }
    Ok(total.min(0.0))
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String, BackendError>;
}

impl<G: TextGenerator + ?Sized> TextGenerator for Arc<G> {
    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String, BackendError> {
        (**self).generate(prompt, temperature, max_tokens)
    }
}

pub fn generate_text<G: TextGenerator + ?Sized>(
    generator: &G,
    prompt: &str,
    temperature: f64,
    max_tokens: usize,
) -> Result<String, BackendError> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(BackendError::Usage(format!("temperature must be >= 0, got {temperature}")));
    }
    if max_tokens == 0 {
        return Err(BackendError::Usage("max_tokens must be positive".into()));
    }
    generator.generate(prompt, temperature, max_tokens)
}

pub trait Tokenizer: Send + Sync {
    fn fingerprint(&self) -> &str;
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;
    fn decode(&self, tokens: &[TokenId]) -> Result<String, BackendError>;
}

impl<T: Tokenizer + ?Sized> Tokenizer for Arc<T> {
    fn fingerprint(&self) -> &str {
        (**self).fingerprint()
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).encode(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        (**self).decode(tokens)
    }
}

/// Counts `logits` calls made through it.
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicU64,
}

impl<P: LogitProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<P: LogitProvider> LogitProvider for CountingProvider<P> {
    fn descriptor(&self) -> &ProviderDescriptor {
        self.inner.descriptor()
    }

    fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: usize) -> TableProvider {
        let d = ProviderDescriptor::new(v, 0, "fp").unwrap();
        TableProvider::new(d, vec![0.0; v]).unwrap()
    }

    #[test]
    fn compatible_examples() {
        let a = ProviderDescriptor::new(4, 0, "fp").unwrap();
        assert!(compatible(&a, &a.clone()));
        let b = ProviderDescriptor::new(5, 0, "fp").unwrap();
        assert!(!compatible(&a, &b));
        let c = ProviderDescriptor::new(4, 0, "other").unwrap();
        assert!(!compatible(&a, &c));
        let d = ProviderDescriptor::new(4, 1, "fp").unwrap();
        assert!(!compatible(&a, &d));
    }

    #[test]
    fn descriptor_rejects_eos_outside_vocab() {
        assert!(ProviderDescriptor::new(4, 4, "fp").is_err());
        assert!(ProviderDescriptor::new(0, 0, "fp").is_err());
    }

    #[test]
    fn uniform_single_token_log_likelihood() {
        let p = uniform(4);
        let ll = sequence_log_likelihood(&p, &TokenContext::default(), &[2]).unwrap();
        assert!((ll - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_token_log_likelihood_is_additive() {
        let p = uniform(4);
        let ll = sequence_log_likelihood(&p, &TokenContext::new(vec![1]), &[2, 3]).unwrap();
        assert!((ll - 2.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_approach_zero_from_below() {
        let d = ProviderDescriptor::new(4, 0, "fp").unwrap();
        let mut prev = f64::NEG_INFINITY;
        for gap in [1.0, 5.0, 10.0, 20.0] {
            let p = TableProvider::new(d.clone(), vec![gap, 0.0, 0.0, 0.0]).unwrap();
            let ll = sequence_log_likelihood(&p, &TokenContext::default(), &[0]).unwrap();
            assert!(ll <= 0.0 && ll > prev);
            let oracle = -(3.0 * (-gap).exp()).ln_1p();
            assert!((ll - oracle).abs() < 1e-12);
            prev = ll;
        }
        assert!(prev > -1e-7);
    }

    #[test]
    fn log_likelihood_rejects_bad_answers() {
        let p = uniform(4);
        assert!(matches!(
            sequence_log_likelihood(&p, &TokenContext::default(), &[7]),
            Err(BackendError::OutOfVocab { token: 7, .. })
        ));
        assert!(matches!(
            sequence_log_likelihood(&p, &TokenContext::default(), &[]),
            Err(BackendError::Usage(_))
        ));
    }

    #[test]
    fn next_logits_rejects_out_of_vocab_context() {
        let p = uniform(4);
        assert!(matches!(
            next_logits(&p, &TokenContext::new(vec![0, 9])),
            Err(BackendError::OutOfVocab { token: 9, vocab_size: 4 })
        ));
    }

    #[test]
    fn generate_text_validates_arguments() {
        let g = EchoGenerator;
        assert!(matches!(generate_text(&g, "hi", 0.0, 0), Err(BackendError::Usage(_))));
        assert!(matches!(generate_text(&g, "hi", -1.0, 4), Err(BackendError::Usage(_))));
        assert!(generate_text(&g, "hi", 1.0, 4).is_ok());
    }

    #[test]
    fn counting_provider_counts() {
        let p = CountingProvider::new(uniform(3));
        sequence_log_likelihood(&p, &TokenContext::default(), &[1, 2, 0]).unwrap();
        assert_eq!(p.calls(), 3);
    }
}
