//! Naive and contrastive decoding over an abstract logit provider.
//!
//! Each step queries the provider under three contexts (prompt + input,
//! input alone, negative sample + input), converts each to log-probabilities,
//! and scores candidate tokens by
//!
//! ```text
//! (1 + a + b) * lp_prompt(y) - a * lp_plain(y) - b * lp_neg(y)
//! ```
//!
//! restricted to tokens whose prompt-conditioned probability is within a
//! factor `epsilon` of the most likely token. With `a = b = 0` this is plain
//! decoding from the prompt-conditioned distribution.

mod http;
mod toy;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::negative::NegativeSample;
use crate::prompt::{PromptTemplate, SynthesizedPrompt};
use crate::text::normalized_tokens;

pub use http::{vocab_hash, HttpLogitProvider};
pub use toy::{BigramProvider, BigramTable, RoutedProvider, ToyLmSpec};

pub const DEFAULT_PLAUSIBILITY: f64 = 0.1;
pub const DEFAULT_LOGPROB_FLOOR: f64 = -30.0;
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider transport failure: {0}")]
    Transport(String),
    #[error("provider contract violation: {0}")]
    Contract(String),
    #[error("token {0:?} is not in the provider vocabulary")]
    UnknownToken(String),
    #[error("vocabulary hash mismatch: expected {expected}, provider reported {found}")]
    VocabMismatch { expected: String, found: String },
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("invalid decoding config: {0}")]
    Config(String),
    #[error("log-prob vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("decoding failed at step {step} after emitting {emitted:?}: {source}")]
    Partial {
        step: usize,
        emitted: String,
        #[source]
        source: ProviderError,
    },
}

/// Ordered token list with reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, ProviderError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(ProviderError::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if tokens.is_empty() {
            return Err(ProviderError::Contract("empty vocabulary".into()));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lowercased word/punctuation tokens. Words outside the vocabulary map to
    /// `<unk>` when the vocabulary has it, otherwise they are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ProviderError> {
        let unk = self.id(UNK_TOKEN);
        normalized_tokens(text)
            .into_iter()
            .map(|t| self.id(&t).or(unk).ok_or(ProviderError::UnknownToken(t)))
            .collect()
    }

    /// Like [`Vocab::encode`] but never substitutes `<unk>`.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>, ProviderError> {
        normalized_tokens(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or(ProviderError::UnknownToken(t)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.tokens[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// A language model seen as a function from context to next-token logits.
/// Implementations must be deterministic per context and safe to call from
/// several threads.
pub trait LogitProvider: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// Logits over [`LogitProvider::vocab`]; entries are finite or `-inf`.
    fn logits(&self, context: &[usize]) -> Result<Vec<f64>, ProviderError>;

    fn eos(&self) -> Option<usize> {
        self.vocab().id(EOS_TOKEN)
    }
}

/// Log-probabilities over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbVector(pub Vec<f64>);

impl LogProbVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted log-softmax. Rejects NaN, `+inf`, and all-`-inf` input.
pub fn log_softmax(logits: &[f64]) -> Result<LogProbVector, ProviderError> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(ProviderError::Contract("NaN or +inf logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ProviderError::Contract("every logit is -inf".into()));
    }
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(LogProbVector(logits.iter().map(|v| v - max - lse).collect()))
}

pub fn logprobs(provider: &dyn LogitProvider, context: &[usize]) -> Result<LogProbVector, ProviderError> {
    let logits = provider.logits(context)?;
    if logits.len() != provider.vocab().len() {
        return Err(ProviderError::Contract(format!(
            "{} logits for a vocabulary of {}",
            logits.len(),
            provider.vocab().len()
        )));
    }
    log_softmax(&logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sampled { seed: u64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub plausibility_epsilon: f64,
    pub logprob_floor: f64,
    pub max_tokens: usize,
    pub strategy: Strategy,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 5.0,
            plausibility_epsilon: DEFAULT_PLAUSIBILITY,
            logprob_floor: DEFAULT_LOGPROB_FLOOR,
            max_tokens: 64,
            strategy: Strategy::Greedy,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(DecodeError::Config("alpha and beta must be finite and >= 0".into()));
        }
        if !(self.plausibility_epsilon > 0.0 && self.plausibility_epsilon <= 1.0) {
            return Err(DecodeError::Config("plausibility epsilon must lie in (0, 1]".into()));
        }
        if !(self.logprob_floor.is_finite() && self.logprob_floor <= 0.0) {
            return Err(DecodeError::Config("log-prob floor must be finite and <= 0".into()));
        }
        if let Strategy::Sampled { temperature, .. } = self.strategy {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(DecodeError::Config("temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Unnormalized contrastive score of one token.
pub fn contrastive_score(lp_prompt: f64, lp_plain: f64, lp_neg: f64, alpha: f64, beta: f64, floor: f64) -> f64 {
    (1.0 + alpha + beta) * lp_prompt - alpha * lp_plain.max(floor) - beta * lp_neg.max(floor)
}

/// Plausibility-restricted, renormalized contrastive distribution.
pub fn combine(
    lp_prompt: &LogProbVector,
    lp_plain: &LogProbVector,
    lp_neg: &LogProbVector,
    cfg: &DecodingConfig,
) -> Result<LogProbVector, DecodeError> {
    if lp_plain.len() != lp_prompt.len() {
        return Err(DecodeError::LengthMismatch(lp_prompt.len(), lp_plain.len()));
    }
    if lp_neg.len() != lp_prompt.len() {
        return Err(DecodeError::LengthMismatch(lp_prompt.len(), lp_neg.len()));
    }
    let max = lp_prompt.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max + cfg.plausibility_epsilon.ln();
    let scores: Vec<f64> = (0..lp_prompt.len())
        .map(|y| {
            let p = lp_prompt.0[y];
            if p >= threshold && p > f64::NEG_INFINITY {
                contrastive_score(p, lp_plain.0[y], lp_neg.0[y], cfg.alpha, cfg.beta, cfg.logprob_floor)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(log_softmax(&scores)?)
}

/// Token contexts for the three conditionals plus the emitted suffix.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub prompt_context: Vec<usize>,
    pub plain_context: Vec<usize>,
    pub negative_context: Vec<usize>,
    pub emitted: Vec<usize>,
    rng: Option<ChaCha8Rng>,
}

impl GenerationState {
    pub fn new(prompt_context: Vec<usize>, plain_context: Vec<usize>, negative_context: Vec<usize>, cfg: &DecodingConfig) -> Self {
        let rng = match cfg.strategy {
            Strategy::Greedy => None,
            Strategy::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self {
            prompt_context,
            plain_context,
            negative_context,
            emitted: Vec::new(),
            rng,
        }
    }

    fn push(&mut self, token: usize) {
        self.prompt_context.push(token);
        self.plain_context.push(token);
        self.negative_context.push(token);
        self.emitted.push(token);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub token: String,
    pub token_id: usize,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub lp_prompt: f64,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub lp_plain: f64,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub lp_negative: f64,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub lp_combined: f64,
}

fn sample_index(lp: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = lp.iter().map(|v| v / temperature).collect();
    let lse = logsumexp(&scaled);
    let mut u = rng.random::<f64>();
    let mut last = argmax(lp);
    for (i, v) in scaled.iter().enumerate() {
        let p = (v - lse).exp();
        if p > 0.0 {
            last = i;
            if u < p {
                return i;
            }
            u -= p;
        }
    }
    last
}

/// One contrastive step: query, combine, select, append.
pub fn decode_step(
    state: &mut GenerationState,
    provider: &dyn LogitProvider,
    cfg: &DecodingConfig,
) -> Result<StepDiagnostics, DecodeError> {
    let (lp_prompt, (lp_plain, lp_neg)) = rayon::join(
        || logprobs(provider, &state.prompt_context),
        || {
            rayon::join(
                || logprobs(provider, &state.plain_context),
                || logprobs(provider, &state.negative_context),
            )
        },
    );
    let (lp_prompt, lp_plain, lp_neg) = (lp_prompt?, lp_plain?, lp_neg?);
    let combined = combine(&lp_prompt, &lp_plain, &lp_neg, cfg)?;
    let token = match (cfg.strategy, state.rng.as_mut()) {
        (Strategy::Sampled { temperature, .. }, Some(rng)) => sample_index(&combined.0, temperature, rng),
        _ => combined.argmax(),
    };
    state.push(token);
    Ok(StepDiagnostics {
        token: provider.vocab().token(token).to_string(),
        token_id: token,
        lp_prompt: lp_prompt.0[token],
        lp_plain: lp_plain.0[token],
        lp_negative: lp_neg.0[token],
        lp_combined: combined.0[token],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxTokens,
    EndOfSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub text: String,
    pub steps: Vec<StepDiagnostics>,
    pub stop: StopReason,
}

/// Runs [`decode_step`] until `max_tokens` or the end-of-sequence token. The
/// end-of-sequence token is recorded in the diagnostics but not in the text.
pub fn generate_from_state(
    provider: &dyn LogitProvider,
    mut state: GenerationState,
    cfg: &DecodingConfig,
) -> Result<TransferResult, DecodeError> {
    cfg.validate()?;
    let eos = provider.eos();
    let mut steps = Vec::new();
    let mut stop = StopReason::MaxTokens;
    for step in 0..cfg.max_tokens {
        let diag = decode_step(&mut state, provider, cfg).map_err(|e| match e {
            DecodeError::Provider(source) => DecodeError::Partial {
                step,
                emitted: provider.vocab().decode(&state.emitted),
                source,
            },
            other => other,
        })?;
        let done = Some(diag.token_id) == eos;
        steps.push(diag);
        if done {
            stop = StopReason::EndOfSequence;
            break;
        }
    }
    let content: Vec<usize> = state.emitted.iter().copied().filter(|t| Some(*t) != eos).collect();
    Ok(TransferResult {
        text: provider.vocab().decode(&content),
        steps,
        stop,
    })
}

/// Prompt, plain and negative token contexts.
pub type Contexts = (Vec<usize>, Vec<usize>, Vec<usize>);

/// The three token contexts for a prompt, input and negative sample. All end
/// with the template's `Input:`/`Output:` tail so they differ only in what
/// precedes it.
pub fn build_contexts(
    vocab: &Vocab,
    prompt: &SynthesizedPrompt,
    x: &str,
    negative: &NegativeSample,
) -> Result<Contexts, ProviderError> {
    let tail = PromptTemplate::v1().render_input(x);
    let prompt_ctx = vocab.encode(&prompt.rendered)?;
    let plain_ctx = vocab.encode(&tail)?;
    let neg_ctx = vocab.encode(&format!("{}\n\n{}", negative.text, tail))?;
    Ok((prompt_ctx, plain_ctx, neg_ctx))
}

pub fn generate(
    provider: &dyn LogitProvider,
    prompt: &SynthesizedPrompt,
    x: &str,
    negative: &NegativeSample,
    cfg: &DecodingConfig,
) -> Result<TransferResult, DecodeError> {
    let (p, plain, neg) = build_contexts(provider.vocab(), prompt, x, negative)?;
    generate_from_state(provider, GenerationState::new(p, plain, neg, cfg), cfg)
}

/// Plain greedy or sampled decoding from one context (no contrast).
pub fn generate_naive(provider: &dyn LogitProvider, context: Vec<usize>, cfg: &DecodingConfig) -> Result<TransferResult, DecodeError> {
    let naive = DecodingConfig {
        alpha: 0.0,
        beta: 0.0,
        plausibility_epsilon: f64::MIN_POSITIVE,
        ..cfg.clone()
    };
    generate_from_state(provider, GenerationState::new(context.clone(), context.clone(), context, &naive), &naive)
}
