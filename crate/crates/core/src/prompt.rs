//! Prompt synthesis: four-dimension pattern analysis of each few-shot pair,
//! analysis chains, similarity reranking and final prompt assembly.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::FewShotPair;
use crate::embed::{cosine_similarity, EmbedError, JointEncoder, SentenceEmbedding};
use crate::http::{Endpoint, JsonClient};

/// Attempts per analysis request: one initial call plus three retries.
pub const MAX_ATTEMPTS: usize = 4;
pub const ANALYSIS_MAX_TOKENS: usize = 256;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("text generation transport failure: {0}")]
    Transport(String),
    #[error("{dimension} analysis of pair {pair} returned no text after {attempts} attempts")]
    EmptyAnalysis {
        pair: String,
        dimension: StyleDimension,
        attempts: usize,
    },
    #[error("{dimension} analysis of pair {pair}: {message}")]
    Analysis {
        pair: String,
        dimension: StyleDimension,
        message: String,
    },
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StyleDimension {
    Lexis,
    Syntax,
    Mood,
    Semantics,
}

impl StyleDimension {
    /// Fixed analysis order.
    pub const ALL: [StyleDimension; 4] = [Self::Lexis, Self::Syntax, Self::Mood, Self::Semantics];

    pub fn label(self) -> &'static str {
        match self {
            Self::Lexis => "Lexis",
            Self::Syntax => "Syntax",
            Self::Mood => "Mood",
            Self::Semantics => "Semantics",
        }
    }

    pub fn default_prompt(self) -> &'static str {
        match self {
            Self::Lexis => "Analyze the lexical variations between the following sentence pairs in terms of word choice, vocabulary, and stylistic expression.",
            Self::Syntax => "Examine and compare the syntactic structures of these style transfer sentence pairs, focusing on sentence construction, grammatical patterns, and syntax differences.",
            Self::Mood => "Evaluate the tone of these texts by comparing their mood, emotional cues, and overall attitude towards the subject matter.",
            Self::Semantics => "Analyze the semantic shifts between these sentence pairs, identifying differences in meaning, context, and interpretation.",
        }
    }
}

impl fmt::Display for StyleDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Descriptive prompt per dimension; defaults can be overridden.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptivePrompts {
    prompts: Vec<(StyleDimension, String)>,
}

impl Default for DescriptivePrompts {
    fn default() -> Self {
        Self {
            prompts: StyleDimension::ALL
                .iter()
                .map(|d| (*d, d.default_prompt().to_string()))
                .collect(),
        }
    }
}

impl DescriptivePrompts {
    pub fn with_override(mut self, dim: StyleDimension, prompt: impl Into<String>) -> Result<Self, PromptError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(PromptError::Argument(format!("empty descriptive prompt for {dim}")));
        }
        for (d, p) in &mut self.prompts {
            if *d == dim {
                *p = prompt.clone();
            }
        }
        Ok(self)
    }

    pub fn get(&self, dim: StyleDimension) -> &str {
        &self
            .prompts
            .iter()
            .find(|(d, _)| *d == dim)
            .expect("all four dimensions present")
            .1
    }
}

// ---------------------------------------------------------------------------
// Text generation clients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
}

/// A text-completion capability. At temperature 0 implementations must return
/// identical text for identical requests.
pub trait TextGenClient: Send + Sync {
    /// `Err` means a transport failure; callers may retry.
    fn complete(&self, request: &GenRequest) -> Result<String, String>;
}

/// Returns the request prompt unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoClient;

impl TextGenClient for EchoClient {
    fn complete(&self, request: &GenRequest) -> Result<String, String> {
        Ok(request.prompt.clone())
    }
}

/// Looks up responses by the descriptive prompt that opens the request.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CannedClient {
    /// Prefix → response; the longest matching prefix wins.
    pub responses: HashMap<String, String>,
    #[serde(default)]
    pub fallback: Option<String>,
}

impl CannedClient {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self {
            responses,
            fallback: None,
        }
    }
}

impl TextGenClient for CannedClient {
    fn complete(&self, request: &GenRequest) -> Result<String, String> {
        self.responses
            .iter()
            .filter(|(k, _)| request.prompt.starts_with(k.as_str()))
            .max_by_key(|(k, _)| k.len())
            .map(|(_, v)| v.clone())
            .or_else(|| self.fallback.clone())
            .ok_or_else(|| "no canned response".to_string())
    }
}

/// Fails the first `failures` calls, then delegates.
pub struct FlakyClient<C> {
    inner: C,
    failures: usize,
    calls: AtomicUsize,
}

impl<C> FlakyClient<C> {
    pub fn new(inner: C, failures: usize) -> Self {
        Self {
            inner,
            failures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<C: TextGenClient> TextGenClient for FlakyClient<C> {
    fn complete(&self, request: &GenRequest) -> Result<String, String> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            return Err(format!("injected failure {}", n + 1));
        }
        self.inner.complete(request)
    }
}

/// Remote completion service speaking `{model_id, prompt, temperature,
/// max_tokens}` → `{text}`.
pub struct HttpTextGenClient {
    client: JsonClient,
}

impl HttpTextGenClient {
    pub fn new(endpoint: Endpoint) -> Result<Self, String> {
        Ok(Self {
            client: JsonClient::new(endpoint)?,
        })
    }
}

impl TextGenClient for HttpTextGenClient {
    fn complete(&self, request: &GenRequest) -> Result<String, String> {
        let path = self.client.endpoint().path.clone();
        let resp: GenResponse = self.client.post(&path, request)?;
        Ok(resp.text)
    }
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub model_id: String,
    pub max_tokens: usize,
    pub prompts: DescriptivePrompts,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            model_id: "analysis".into(),
            max_tokens: ANALYSIS_MAX_TOKENS,
            prompts: DescriptivePrompts::default(),
        }
    }
}

/// Request body: the descriptive prompt, a blank line, then `source ||| target`.
pub fn analysis_request(pair: &FewShotPair, dim: StyleDimension, settings: &AnalysisSettings) -> GenRequest {
    GenRequest {
        model_id: settings.model_id.clone(),
        prompt: format!("{}\n\n{}", settings.prompts.get(dim), pair.render()),
        temperature: 0.0,
        max_tokens: settings.max_tokens,
    }
}

/// Analyzes one dimension of a pair, retrying transport failures and empty
/// responses up to [`MAX_ATTEMPTS`] calls in total.
pub fn analyze_pattern(
    pair: &FewShotPair,
    dim: StyleDimension,
    client: &dyn TextGenClient,
    settings: &AnalysisSettings,
) -> Result<String, PromptError> {
    let request = analysis_request(pair, dim, settings);
    let mut last_transport = None;
    for attempt in 1..=MAX_ATTEMPTS {
        match client.complete(&request) {
            Ok(text) => {
                let trimmed = text.trim();
                if !trimmed.is_empty() {
                    return Ok(trimmed.to_string());
                }
                warn!("empty {dim} analysis for pair {} (attempt {attempt})", pair.id);
                last_transport = None;
            }
            Err(e) => {
                warn!("{dim} analysis for pair {} failed (attempt {attempt}): {e}", pair.id);
                last_transport = Some(e);
            }
        }
    }
    match last_transport {
        Some(e) => Err(PromptError::Transport(e)),
        None => Err(PromptError::EmptyAnalysis {
            pair: pair.id.clone(),
            dimension: dim,
            attempts: MAX_ATTEMPTS,
        }),
    }
}

/// A few-shot pair with its four analyses and its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisChain {
    pub pair: FewShotPair,
    /// In [`StyleDimension::ALL`] order.
    pub analyses: Vec<(StyleDimension, String)>,
    pub pair_embedding: SentenceEmbedding,
}

impl AnalysisChain {
    pub fn new(
        pair: FewShotPair,
        analyses: Vec<(StyleDimension, String)>,
        pair_embedding: SentenceEmbedding,
    ) -> Result<Self, PromptError> {
        let dims: Vec<_> = analyses.iter().map(|(d, _)| *d).collect();
        if dims != StyleDimension::ALL {
            return Err(PromptError::Argument(format!(
                "chain for pair {} must cover Lexis, Syntax, Mood, Semantics in order",
                pair.id
            )));
        }
        if let Some((d, _)) = analyses.iter().find(|(_, a)| a.trim().is_empty()) {
            return Err(PromptError::Argument(format!("empty {d} analysis for pair {}", pair.id)));
        }
        Ok(Self {
            pair,
            analyses,
            pair_embedding,
        })
    }

    pub fn analysis(&self, dim: StyleDimension) -> &str {
        &self.analyses.iter().find(|(d, _)| *d == dim).expect("complete chain").1
    }
}

/// Runs all four analyses (concurrently) and attaches the pair embedding.
pub fn build_chain(
    pair: &FewShotPair,
    client: &dyn TextGenClient,
    encoder: &JointEncoder,
    settings: &AnalysisSettings,
) -> Result<AnalysisChain, PromptError> {
    let analyses = StyleDimension::ALL
        .par_iter()
        .map(|&dim| {
            analyze_pattern(pair, dim, client, settings)
                .map(|text| (dim, text))
                .map_err(|e| match e {
                    PromptError::Transport(message) => PromptError::Analysis {
                        pair: pair.id.clone(),
                        dimension: dim,
                        message,
                    },
                    other => other,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let embedding = encoder.embed_pair(pair)?;
    AnalysisChain::new(pair.clone(), analyses, embedding)
}

/// Stable descending sort by cosine similarity to `input`.
pub fn rerank(input: &SentenceEmbedding, chains: Vec<AnalysisChain>) -> Result<Vec<AnalysisChain>, PromptError> {
    let mut scored = chains
        .into_iter()
        .map(|c| cosine_similarity(input, &c.pair_embedding).map(|s| (s, c)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

// ---------------------------------------------------------------------------
// Template and assembly
// ---------------------------------------------------------------------------

const TEMPLATE_V1: &str = include_str!("../templates/prompt_v1.txt");

/// Prompt layout strings with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub header: String,
    pub chain_title: String,
    pub sample: String,
    pub analysis: String,
    pub input: String,
    pub output: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut fields = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PromptError::Argument(format!("template line without '=': {line}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| PromptError::Argument(format!("template missing {k}")))
        };
        Ok(Self {
            header: take("header")?,
            chain_title: take("chain_title")?,
            sample: take("sample")?,
            analysis: take("analysis")?,
            input: take("input")?,
            output: take("output")?,
        })
    }

    /// The built-in version 1 layout.
    pub fn v1() -> &'static PromptTemplate {
        static V1: OnceLock<PromptTemplate> = OnceLock::new();
        V1.get_or_init(|| Self::parse(TEMPLATE_V1).expect("bundled template parses"))
    }

    pub fn render_chain(&self, n: usize, chain: &AnalysisChain) -> String {
        let n_s = n.to_string();
        let mut lines = vec![
            fill(&self.chain_title, &[("n", &n_s)]),
            fill(&self.sample, &[("n", &n_s), ("pair", &chain.pair.render())]),
        ];
        for (m, (dim, text)) in chain.analyses.iter().enumerate() {
            let m_s = (m + 1).to_string();
            lines.push(fill(&self.analysis, &[("n", &n_s), ("m", &m_s), ("dim", dim.label())]));
            lines.push(text.clone());
        }
        lines.join("\n")
    }

    /// The `Input:`/`Output:` tail that ends every decoding context.
    pub fn render_input(&self, x: &str) -> String {
        format!("{}\n{}", fill(&self.input, &[("x", x)]), self.output)
    }
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Final prompt `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedPrompt {
    pub task_header: String,
    pub ordered_chains: Vec<AnalysisChain>,
    pub input_slot: String,
    pub rendered: String,
}

impl SynthesizedPrompt {
    /// Text preceding the input slot (header plus chains).
    pub fn instructions(&self) -> &str {
        let tail = PromptTemplate::v1().render_input(&self.input_slot);
        self.rendered.strip_suffix(&tail).unwrap_or(&self.rendered).trim_end()
    }
}

pub fn assemble_prompt(s1: &str, s2: &str, chains: Vec<AnalysisChain>, x: &str) -> Result<SynthesizedPrompt, PromptError> {
    assemble_with(PromptTemplate::v1(), s1, s2, chains, x)
}

/// Header, blank line, each chain followed by a blank line, then the input tail.
pub fn assemble_with(
    template: &PromptTemplate,
    s1: &str,
    s2: &str,
    chains: Vec<AnalysisChain>,
    x: &str,
) -> Result<SynthesizedPrompt, PromptError> {
    if x.trim().is_empty() {
        return Err(PromptError::Argument("input text is empty".into()));
    }
    if s1 == s2 {
        return Err(PromptError::Argument(format!("source and target style are both {s1:?}")));
    }
    let header = fill(&template.header, &[("s1", s1), ("s2", s2)]);
    let mut parts = vec![header.clone()];
    parts.extend(chains.iter().enumerate().map(|(i, c)| template.render_chain(i + 1, c)));
    parts.push(template.render_input(x));
    Ok(SynthesizedPrompt {
        task_header: header,
        ordered_chains: chains,
        input_slot: x.to_string(),
        rendered: parts.join("\n\n"),
    })
}
