//! Greedy decoding and conflict-disentangling contrastive decoding.
//!
//! Both contrastive modes pick, at every step,
//!
//! ```text
//! y_t = argmax_v ( expert[v] - coeff * contrast[v] )
//! ```
//!
//! where the contrast vector comes either from the same model queried
//! without evidence (internal/external mode, `coeff = alpha`) or from an
//! amateur model that saw the same evidence (expert/amateur mode,
//! `coeff = beta`). Ties go to the lowest token id. The chosen token is
//! appended to every context before the next step.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    compatible, next_logits, BackendError, LogitProvider, LogitScale, TextGenerator, TokenContext, TokenId, Tokenizer,
};

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("providers are incompatible: {0}")]
    Incompatible(String),
    #[error("invalid decoder configuration: {0}")]
    InvalidConfig(String),
    #[error("provider failed at step {step}: {source}")]
    Provider {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_len: usize,
    /// Restrict the argmax to the expert's top-k tokens. Off by default.
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            max_len: DEFAULT_MAX_LEN,
            top_k: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_len == 0 {
            return Err(DecodeError::InvalidConfig("max_len must be at least 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DecodeError::InvalidConfig(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.top_k == Some(0) {
            return Err(DecodeError::InvalidConfig("top_k must be positive when set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    InternalExternal,
    ExpertAmateur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub expert: Vec<f64>,
    /// Absent for plain greedy decoding.
    pub contrast: Option<Vec<f64>>,
    pub combined: Vec<f64>,
    pub chosen: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub mode: DecodeMode,
    pub coeff: f64,
    pub expert_scale: LogitScale,
    pub contrast_scale: Option<LogitScale>,
    pub steps: Vec<DecodeStep>,
    /// Generated tokens, excluding the terminating eos.
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
}

/// One line of the JSONL trace format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: usize,
    pub mode: DecodeMode,
    pub coeff: f64,
    pub expert_scale: LogitScale,
    pub contrast_scale: Option<LogitScale>,
    pub expert: Vec<f64>,
    pub contrast: Option<Vec<f64>>,
    pub combined: Vec<f64>,
    pub chosen: TokenId,
    /// Set on the last line only.
    pub stop: Option<StopReason>,
}

impl DecodeTrace {
    /// Recomputes every combined vector from its stored operands.
    pub fn is_consistent(&self) -> bool {
        self.steps.iter().all(|s| {
            let expect = combine(&s.expert, s.contrast.as_deref(), self.coeff);
            expect.len() == s.combined.len()
                && expect.iter().zip(&s.combined).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DecodeError> {
        let last = self.steps.len().saturating_sub(1);
        for (i, s) in self.steps.iter().enumerate() {
            let line = TraceLine {
                step: i,
                mode: self.mode,
                coeff: self.coeff,
                expert_scale: self.expert_scale,
                contrast_scale: self.contrast_scale,
                expert: s.expert.clone(),
                contrast: s.contrast.clone(),
                combined: s.combined.clone(),
                chosen: s.chosen,
                stop: (i == last).then_some(self.stop),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R, eos: TokenId) -> Result<Self, DecodeError> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            lines.push(serde_json::from_str::<TraceLine>(&line)?);
        }
        let first = lines
            .first()
            .ok_or_else(|| DecodeError::InvalidConfig("empty trace".into()))?
            .clone();
        let stop = lines
            .last()
            .and_then(|l| l.stop)
            .ok_or_else(|| DecodeError::InvalidConfig("trace has no stop marker".into()))?;
        let steps: Vec<DecodeStep> = lines
            .into_iter()
            .map(|l| DecodeStep {
                expert: l.expert,
                contrast: l.contrast,
                combined: l.combined,
                chosen: l.chosen,
            })
            .collect();
        let tokens = steps.iter().map(|s| s.chosen).filter(|t| *t != eos).collect();
        Ok(Self {
            mode: first.mode,
            coeff: first.coeff,
            expert_scale: first.expert_scale,
            contrast_scale: first.contrast_scale,
            steps,
            tokens,
            stop,
        })
    }
}

fn combine(expert: &[f64], contrast: Option<&[f64]>, coeff: f64) -> Vec<f64> {
    match contrast {
        None => expert.to_vec(),
        Some(c) => expert.iter().zip(c).map(|(e, c)| e - coeff * c).collect(),
    }
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best as TokenId
}

fn top_k_mask(expert: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..expert.len()).collect();
    // stable sort keeps lowest ids first among equal scores
    order.sort_by(|a, b| expert[*b].total_cmp(&expert[*a]));
    let mut mask = vec![false; expert.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn choose(combined: &[f64], expert: &[f64], top_k: Option<usize>) -> TokenId {
    match top_k {
        None => argmax_lowest(combined),
        Some(k) => {
            let mask = top_k_mask(expert, k);
            let mut best: Option<usize> = None;
            for (i, s) in combined.iter().enumerate() {
                if mask[i] && best.is_none_or(|b| *s > combined[b]) {
                    best = Some(i);
                }
            }
            best.unwrap_or(0) as TokenId
        }
    }
}

struct Contrast<'a, C: ?Sized> {
    provider: &'a C,
    ctx: TokenContext,
    coeff: f64,
}

fn run<E, C>(
    mode: DecodeMode,
    expert: &E,
    mut expert_ctx: TokenContext,
    mut contrast: Option<Contrast<'_, C>>,
    max_len: usize,
    top_k: Option<usize>,
) -> Result<DecodeTrace, DecodeError>
where
    E: LogitProvider + ?Sized,
    C: LogitProvider + ?Sized,
{
    if max_len == 0 {
        return Err(DecodeError::InvalidConfig("max_len must be at least 1".into()));
    }
    let eos = expert.descriptor().eos_token;
    let coeff = contrast.as_ref().map_or(0.0, |c| c.coeff);
    let mut steps = Vec::new();
    let mut tokens = Vec::new();
    let mut stop = StopReason::MaxLen;
    for step in 0..max_len {
        let e = next_logits(expert, &expert_ctx)
            .map_err(|source| DecodeError::Provider { step, source })?
            .scores;
        let c = match &contrast {
            Some(c) => Some(
                next_logits(c.provider, &c.ctx)
                    .map_err(|source| DecodeError::Provider { step, source })?
                    .scores,
            ),
            None => None,
        };
        let combined = combine(&e, c.as_deref(), coeff);
        let chosen = choose(&combined, &e, top_k);
        steps.push(DecodeStep {
            expert: e,
            contrast: c,
            combined,
            chosen,
        });
        if chosen == eos {
            stop = StopReason::Eos;
            break;
        }
        tokens.push(chosen);
        expert_ctx.push(chosen);
        if let Some(c) = contrast.as_mut() {
            c.ctx.push(chosen);
        }
    }
    Ok(DecodeTrace {
        mode,
        coeff,
        expert_scale: expert.descriptor().scale,
        contrast_scale: contrast.as_ref().map(|c| c.provider.descriptor().scale),
        steps,
        tokens,
        stop,
    })
}

fn ensure_compatible<A, B>(a: &A, b: &B) -> Result<(), DecodeError>
where
    A: LogitProvider + ?Sized,
    B: LogitProvider + ?Sized,
{
    let (da, db) = (a.descriptor(), b.descriptor());
    if compatible(da, db) {
        Ok(())
    } else {
        Err(DecodeError::Incompatible(format!("{da:?} vs {db:?}")))
    }
}

pub fn greedy_decode<P: LogitProvider + ?Sized>(
    provider: &P,
    prompt_ctx: &TokenContext,
    max_len: usize,
) -> Result<DecodeTrace, DecodeError> {
    run::<P, P>(DecodeMode::Greedy, provider, prompt_ctx.clone(), None, max_len, None)
}

/// Expert sees evidence and question; the internal provider sees only the question.
pub fn cd2_internal_external<E, I>(
    expert: &E,
    internal: &I,
    expert_prompt_ctx: &TokenContext,
    internal_prompt_ctx: &TokenContext,
    cfg: &DecoderConfig,
) -> Result<DecodeTrace, DecodeError>
where
    E: LogitProvider + ?Sized,
    I: LogitProvider + ?Sized,
{
    cfg.validate()?;
    ensure_compatible(expert, internal)?;
    let contrast = Contrast {
        provider: internal,
        ctx: internal_prompt_ctx.clone(),
        coeff: cfg.alpha,
    };
    run(
        DecodeMode::InternalExternal,
        expert,
        expert_prompt_ctx.clone(),
        Some(contrast),
        cfg.max_len,
        cfg.top_k,
    )
}

/// Expert and amateur are both conditioned on the same evidence-bearing context.
pub fn cd2_expert_amateur<E, A>(
    expert: &E,
    amateur: &A,
    shared_prompt_ctx: &TokenContext,
    cfg: &DecoderConfig,
) -> Result<DecodeTrace, DecodeError>
where
    E: LogitProvider + ?Sized,
    A: LogitProvider + ?Sized,
{
    cfg.validate()?;
    ensure_compatible(expert, amateur)?;
    let contrast = Contrast {
        provider: amateur,
        ctx: shared_prompt_ctx.clone(),
        coeff: cfg.beta,
    };
    run(
        DecodeMode::ExpertAmateur,
        expert,
        shared_prompt_ctx.clone(),
        Some(contrast),
        cfg.max_len,
        cfg.top_k,
    )
}

/// Text generation by greedy decoding over a logit provider. Temperature is ignored.
pub struct GreedyTextGenerator<P, T> {
    pub provider: P,
    pub tokenizer: T,
}

impl<P: LogitProvider, T: Tokenizer> TextGenerator for GreedyTextGenerator<P, T> {
    fn generate(&self, prompt: &str, _temperature: f64, max_tokens: usize) -> Result<String, BackendError> {
        let ctx = TokenContext::new(self.tokenizer.encode(prompt)?);
        let trace = greedy_decode(&self.provider, &ctx, max_tokens).map_err(|e| match e {
            DecodeError::Provider { source, .. } => source,
            other => BackendError::Usage(other.to_string()),
        })?;
        self.tokenizer.decode(&trace.tokens)
    }
}

/// A logit provider paired with the tokenizer its ids come from.
#[derive(Clone)]
pub struct Model {
    pub provider: Arc<dyn LogitProvider>,
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl Model {
    pub fn new(provider: Arc<dyn LogitProvider>, tokenizer: Arc<dyn Tokenizer>) -> Result<Self, DecodeError> {
        let fp = &provider.descriptor().tokenizer_fingerprint;
        if fp != tokenizer.fingerprint() {
            return Err(DecodeError::Incompatible(format!(
                "provider expects tokenizer {fp}, got {}",
                tokenizer.fingerprint()
            )));
        }
        Ok(Self { provider, tokenizer })
    }

    pub fn encode(&self, text: &str) -> Result<TokenContext, BackendError> {
        Ok(TokenContext::new(self.tokenizer.encode(text)?))
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        self.tokenizer.decode(tokens)
    }

    pub fn eos(&self) -> TokenId {
        self.provider.descriptor().eos_token
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ProviderDescriptor, TableProvider};

    fn desc(v: usize) -> ProviderDescriptor {
        ProviderDescriptor::new(v, 0, "fp").unwrap()
    }

    fn constant(v: Vec<f64>) -> TableProvider {
        TableProvider::new(desc(v.len()), v).unwrap()
    }

    #[test]
    fn greedy_eos_first_gives_empty_answer() {
        let p = constant(vec![5.0, 1.0, 0.0]);
        let t = greedy_decode(&p, &TokenContext::new(vec![1]), 8).unwrap();
        assert!(t.tokens.is_empty());
        assert_eq!(t.stop, StopReason::Eos);
        assert_eq!(t.steps.len(), 1);
    }

    #[test]
    fn greedy_follows_table_chain() {
        // prompt [1]; preferred chain 2 -> 3 -> 4 -> eos
        let mut p = TableProvider::new(desc(5), vec![0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        p.insert(vec![1], vec![0.0, 0.1, 0.9, 0.2, 0.3]).unwrap();
        p.insert(vec![1, 2], vec![0.0, 0.0, 0.0, 2.0, 1.0]).unwrap();
        p.insert(vec![1, 2, 3], vec![0.5, 0.0, 0.0, 0.0, 0.7]).unwrap();
        p.insert(vec![1, 2, 3, 4], vec![3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = greedy_decode(&p, &TokenContext::new(vec![1]), 10).unwrap();
        assert_eq!(t.tokens, vec![2, 3, 4]);
        assert_eq!(t.stop, StopReason::Eos);
    }

    #[test]
    fn greedy_stops_at_max_len() {
        let p = constant(vec![0.0, 1.0, 0.0]);
        let t = greedy_decode(&p, &TokenContext::default(), 2).unwrap();
        assert_eq!(t.tokens, vec![1, 1]);
        assert_eq!(t.stop, StopReason::MaxLen);
        assert!(greedy_decode(&p, &TokenContext::default(), 0).is_err());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn internal_external_worked_example() {
        // combined = [2,1,0.5,0] - 0.5*[3,0,0,0] = [0.5,1,0.5,0]
        let expert = constant(vec![2.0, 1.0, 0.5, 0.0]);
        let internal = constant(vec![3.0, 0.0, 0.0, 0.0]);
        let cfg = DecoderConfig {
            alpha: 0.5,
            max_len: 1,
            ..Default::default()
        };
        let t = cd2_internal_external(&expert, &internal, &TokenContext::default(), &TokenContext::default(), &cfg)
            .unwrap();
        assert_eq!(t.steps[0].combined, vec![0.5, 1.0, 0.5, 0.0]);
        assert_eq!(t.steps[0].chosen, 1);
        assert!(t.is_consistent());
    }

    #[test]
    fn expert_amateur_worked_example() {
        let mut d = desc(3);
        d.eos_token = 2;
        let expert = TableProvider::new(d.clone(), vec![1.0, 1.1, 0.0]).unwrap();
        let amateur = TableProvider::new(d, vec![0.0, 2.0, 0.0]).unwrap();
        let cfg = DecoderConfig {
            beta: 0.5,
            max_len: 1,
            ..Default::default()
        };
        let t = cd2_expert_amateur(&expert, &amateur, &TokenContext::default(), &cfg).unwrap();
        assert_eq!(t.steps[0].chosen, 0);
        let g = greedy_decode(&expert, &TokenContext::default(), 1).unwrap();
        assert_eq!(g.steps[0].chosen, 1);
    }

    #[test]
    fn identical_expert_and_amateur_with_unit_beta_ties_to_zero() {
        let mut d = desc(3);
        d.eos_token = 2;
        let p = TableProvider::new(d, vec![0.3, 4.0, 1.0]).unwrap();
        let cfg = DecoderConfig {
            beta: 1.0,
            max_len: 1,
            ..Default::default()
        };
        let t = cd2_expert_amateur(&p, &p, &TokenContext::default(), &cfg).unwrap();
        assert_eq!(t.steps[0].combined, vec![0.0, 0.0, 0.0]);
        assert_eq!(t.steps[0].chosen, 0);
    }

    #[test]
    fn internal_equal_to_expert_keeps_argmax_below_unit_alpha() {
        let mut p = TableProvider::new(desc(4), vec![0.0, 1.0, 3.0, 2.0]).unwrap();
        p.insert(vec![2], vec![1.0, 0.5, 0.0, 0.0]).unwrap();
        for alpha in [0.0, 0.3, 0.5, 0.7, 0.9] {
            let cfg = DecoderConfig {
                alpha,
                max_len: 4,
                ..Default::default()
            };
            let t = cd2_internal_external(&p, &p, &TokenContext::default(), &TokenContext::default(), &cfg).unwrap();
            let g = greedy_decode(&p, &TokenContext::default(), 4).unwrap();
            assert_eq!(t.tokens, g.tokens, "alpha {alpha}");
            for s in &t.steps {
                let scaled: Vec<f64> = s.expert.iter().map(|e| (1.0 - alpha) * e).collect();
                assert_eq!(argmax_lowest(&scaled), s.chosen);
            }
        }
    }

    #[test]
    fn incompatible_providers_fail_before_any_call() {
        let a = constant(vec![0.0; 3]);
        let b = constant(vec![0.0; 4]);
        let cfg = DecoderConfig::default();
        assert!(matches!(
            cd2_expert_amateur(&a, &b, &TokenContext::default(), &cfg),
            Err(DecodeError::Incompatible(_))
        ));
    }

    #[test]
    fn provider_errors_carry_step_index() {
        let mut p = TableProvider::new(desc(3), vec![0.0, 1.0, 0.0]).unwrap();
        p.insert(vec![1], vec![0.0, 0.0, 1.0]).unwrap();
        // context [9] is out of vocabulary: fails at step 0
        let err = greedy_decode(&p, &TokenContext::new(vec![9]), 3).unwrap_err();
        assert!(matches!(err, DecodeError::Provider { step: 0, .. }));
    }

    #[test]
    fn top_k_restricts_to_expert_candidates() {
        // without restriction the amateur pushes the choice to token 3
        let expert = constant(vec![0.0, 5.0, 4.0, -1.0]);
        let amateur = constant(vec![0.0, 10.0, 8.0, -20.0]);
        let mut cfg = DecoderConfig {
            beta: 1.0,
            max_len: 1,
            ..Default::default()
        };
        let t = cd2_expert_amateur(&expert, &amateur, &TokenContext::default(), &cfg).unwrap();
        assert_eq!(t.tokens, vec![3]);
        cfg.top_k = Some(2);
        let t = cd2_expert_amateur(&expert, &amateur, &TokenContext::default(), &cfg).unwrap();
        assert_eq!(t.tokens, vec![2]);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let expert = constant(vec![0.5, 2.0, 1.0]);
        let internal = constant(vec![0.0, 1.0, 0.25]);
        let cfg = DecoderConfig {
            alpha: 0.3,
            max_len: 3,
            ..Default::default()
        };
        let t = cd2_internal_external(&expert, &internal, &TokenContext::default(), &TokenContext::new(vec![2]), &cfg)
            .unwrap();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), t.steps.len());
        let back = DecodeTrace::read_jsonl(text.as_bytes(), 0).unwrap();
        assert_eq!(back, t);
        assert!(back.is_consistent());
    }

    #[test]
    fn invalid_configs_rejected() {
        let p = constant(vec![0.0; 2]);
        for cfg in [
            DecoderConfig {
                alpha: -0.1,
                ..Default::default()
            },
            DecoderConfig {
                max_len: 0,
                ..Default::default()
            },
            DecoderConfig {
                top_k: Some(0),
                ..Default::default()
            },
        ] {
            assert!(matches!(
                cd2_internal_external(&p, &p, &TokenContext::default(), &TokenContext::default(), &cfg),
                Err(DecodeError::InvalidConfig(_))
            ));
        }
    }
}
