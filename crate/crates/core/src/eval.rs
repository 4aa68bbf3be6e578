//! Automatic metrics: style accuracy, reference/self BLEU, and perplexity.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{logprobs, LogitProvider, ProviderError};
use crate::http::{Endpoint, JsonClient};
use crate::text::normalized_tokens;

pub const MAX_ORDER: usize = 4;
/// Numerator used in place of a zero n-gram match count.
pub const SMOOTHING_EPSILON: f64 = 0.1;
pub const UNKNOWN_LABEL: &str = "unknown";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("list lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("perplexity: {0}")]
    Provider(#[from] ProviderError),
    #[error("classifier: {0}")]
    Classifier(String),
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
}

/// Matched and total n-gram counts per order, plus candidate and reference
/// lengths. Corpus scores add these up before computing precision.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram statistics of one candidate against its references. The
/// reference length is the one closest to the candidate (shorter wins ties).
pub fn sentence_stats(candidate: &str, references: &[&str]) -> BleuStats {
    let cand = normalized_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| normalized_tokens(r)).collect();
    let mut stats = BleuStats {
        cand_len: cand.len(),
        ref_len: refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let cand_counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = cand.len().saturating_sub(n - 1);
        stats.matches[n - 1] = cand_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

/// Score in `[0, 100]` from accumulated statistics. A zero match count becomes
/// [`SMOOTHING_EPSILON`]. Orders with no candidate n-grams are left out of the
/// geometric mean.
pub fn bleu_from_stats(stats: &BleuStats) -> f64 {
    if stats.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        if stats.totals[n] == 0 {
            continue;
        }
        let num = if stats.matches[n] == 0 {
            SMOOTHING_EPSILON
        } else {
            stats.matches[n] as f64
        };
        log_sum += (num / stats.totals[n] as f64).ln();
        orders += 1;
    }
    let c = stats.cand_len as f64;
    let r = stats.ref_len as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    (bp * (log_sum / orders as f64).exp() * 100.0).clamp(0.0, 100.0)
}

/// Smoothed sentence BLEU-4 against one or more references.
pub fn bleu(candidate: &str, references: &[&str]) -> f64 {
    bleu_from_stats(&sentence_stats(candidate, references))
}

/// Corpus BLEU of aligned candidate/reference lists (summed statistics).
pub fn corpus_bleu(candidates: &[String], references: &[String]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch(candidates.len(), references.len()));
    }
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total += sentence_stats(c, &[r.as_str()]);
    }
    Ok(bleu_from_stats(&total))
}

/// `(s-sBLEU, r-sBLEU)`: outputs scored against sources and against references.
pub fn corpus_bleu_pair(outputs: &[String], sources: &[String], references: &[String]) -> Result<(f64, f64), EvalError> {
    Ok((corpus_bleu(outputs, sources)?, corpus_bleu(outputs, references)?))
}

/// `exp(-mean log p(y_t | y_<t))` with the first token scored from the empty
/// context.
pub fn perplexity(provider: &dyn LogitProvider, text: &str) -> Result<f64, EvalError> {
    let tokens = provider.vocab().encode_strict(text)?;
    if tokens.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut nll = 0.0;
    for t in 0..tokens.len() {
        let lp = logprobs(provider, &tokens[..t])?;
        nll -= lp.values()[tokens[t]];
    }
    Ok((nll / tokens.len() as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    pub score: f64,
}

pub trait StyleClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<Classification, EvalError>;
}

/// Majority vote over style lexicon hits. No hits or a tie yields `unknown`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LexiconClassifier {
    lexicon: BTreeMap<String, Vec<String>>,
}

impl LexiconClassifier {
    pub fn new(lexicon: BTreeMap<String, Vec<String>>) -> Self {
        let lexicon = lexicon
            .into_iter()
            .map(|(k, ws)| (k, ws.into_iter().map(|w| w.to_lowercase()).collect()))
            .collect();
        Self { lexicon }
    }

    /// `label: w1 w2 ...` per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut lexicon = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, words) = line.split_once(':').ok_or_else(|| EvalError::Lexicon {
                line: i + 1,
                reason: "expected `label: words`".into(),
            })?;
            let label = label.trim();
            if label.is_empty() {
                return Err(EvalError::Lexicon {
                    line: i + 1,
                    reason: "empty label".into(),
                });
            }
            lexicon
                .entry(label.to_string())
                .or_insert_with(Vec::new)
                .extend(words.split_whitespace().map(str::to_string));
        }
        Ok(Self::new(lexicon))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::Classifier(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.lexicon.keys().map(String::as_str)
    }
}

impl StyleClassifier for LexiconClassifier {
    fn classify(&self, text: &str) -> Result<Classification, EvalError> {
        let tokens = normalized_tokens(text);
        let hits: Vec<(&str, usize)> = self
            .lexicon
            .iter()
            .map(|(label, words)| (label.as_str(), tokens.iter().filter(|t| words.contains(t)).count()))
            .collect();
        let total: usize = hits.iter().map(|h| h.1).sum();
        let best = hits.iter().map(|h| h.1).max().unwrap_or(0);
        let winners: Vec<&str> = hits.iter().filter(|h| h.1 == best).map(|h| h.0).collect();
        if best == 0 || winners.len() > 1 {
            return Ok(Classification {
                label: UNKNOWN_LABEL.into(),
                score: 0.0,
            });
        }
        Ok(Classification {
            label: winners[0].to_string(),
            score: best as f64 / total as f64,
        })
    }
}

/// Remote classifier: `POST {text}` → `{label, score}`.
pub struct HttpClassifier {
    client: JsonClient,
}

impl HttpClassifier {
    pub fn new(endpoint: Endpoint) -> Result<Self, EvalError> {
        Ok(Self {
            client: JsonClient::new(endpoint).map_err(EvalError::Classifier)?,
        })
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    text: &'a str,
}

impl StyleClassifier for HttpClassifier {
    fn classify(&self, text: &str) -> Result<Classification, EvalError> {
        let path = self.client.endpoint().path.clone();
        self.client
            .post(&path, &ClassifyRequest { text })
            .map_err(EvalError::Classifier)
    }
}

/// Fraction of outputs labeled `target`. Classifier failures count as misses.
pub fn style_accuracy(classifier: &dyn StyleClassifier, outputs: &[String], target: &str) -> Result<f64, EvalError> {
    style_accuracy_per_item(classifier, outputs, &vec![target.to_string(); outputs.len()])
}

/// Like [`style_accuracy`] with a target label per output.
pub fn style_accuracy_per_item(classifier: &dyn StyleClassifier, outputs: &[String], targets: &[String]) -> Result<f64, EvalError> {
    if outputs.is_empty() {
        return Err(EvalError::Empty);
    }
    if outputs.len() != targets.len() {
        return Err(EvalError::LengthMismatch(outputs.len(), targets.len()));
    }
    let mut hits = 0;
    for (i, (o, t)) in outputs.iter().zip(targets).enumerate() {
        match classifier.classify(o) {
            Ok(c) if &c.label == t => hits += 1,
            Ok(_) => {}
            Err(e) => warn!("classifier failed on item {i}: {e}"),
        }
    }
    Ok(hits as f64 / outputs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_sbleu: Option<f64>,
    pub s_sbleu: f64,
    pub ppl: f64,
    pub n_items: usize,
}
