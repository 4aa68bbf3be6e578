//! Run configuration, end-to-end transfer/eval/tune runs, and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{fewshot_pairs, load_corpus, CorpusError, CorpusRecord, FewShotPair};
use crate::decode::{
    generate, DecodeError, DecodingConfig, HttpLogitProvider, LogitProvider, StepDiagnostics, StopReason, ToyLmSpec,
};
use crate::embed::{DgcnModel, EmbeddingCache, FeatureSource, JointEncoder, WordVectors};
use crate::eval::{
    corpus_bleu, perplexity, style_accuracy_per_item, EvalReport, HttpClassifier, LexiconClassifier, StyleClassifier,
};
use crate::graph::read_conllu;
use crate::http::Endpoint;
use crate::negative::{select_negative, split_chunks, NegativeSample, DEFAULT_CHUNK_SIZE, DEFAULT_SEPARATORS};
use crate::prompt::{
    assemble_prompt, build_chain, rerank, AnalysisChain, AnalysisSettings, CannedClient, EchoClient, HttpTextGenClient,
    SynthesizedPrompt, TextGenClient, ANALYSIS_MAX_TOKENS,
};
use crate::sampler::select_fewshots;
use crate::text::ConlluIndex;
use crate::tuner::{composite_objective, optimize, write_trace, ObjectiveWeights, SearchBox, SearchMode, TuneOutcome};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "tune_trace.jsonl";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{field}: path {path} does not exist")]
    MissingPath { field: &'static str, path: String },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Setup(String),
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
}

fn setup<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> PipelineError + '_ {
    move |e| PipelineError::Setup(format!("{what}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// JSON table model, see [`ToyLmSpec`].
    Toy { path: PathBuf },
    Http { endpoint: Endpoint, model_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientSpec {
    #[default]
    Echo,
    /// JSON object `{responses: {prefix: text}, fallback?}`.
    Canned { path: PathBuf },
    Http { endpoint: Endpoint },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierSpec {
    Lexicon { path: PathBuf },
    Http { endpoint: Endpoint },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub layers: usize,
    pub dim: usize,
    pub seed: u64,
    /// Saved model weights; random weights from `seed` when absent.
    pub model: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    /// Pre-parsed sentences; anything else gets a flat graph.
    pub conllu: Vec<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            seed: 0,
            model: None,
            word_vectors: None,
            conllu: Vec::new(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub model_id: String,
    pub max_tokens: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            model_id: "analysis".into(),
            max_tokens: ANALYSIS_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub budget: usize,
    pub seed: u64,
    pub mode: SearchMode,
    /// Number of pool records held out (from the end) as the dev set.
    pub dev_size: usize,
    pub weights: ObjectiveWeights,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
}

impl Default for TuningConfig {
    fn default() -> Self {
        let bx = SearchBox::default();
        Self {
            budget: bx.budget,
            seed: 0,
            mode: SearchMode::default(),
            dev_size: 4,
            weights: ObjectiveWeights::default(),
            alpha_range: bx.alpha_range,
            beta_range: bx.beta_range,
        }
    }
}

/// Everything a run needs. Stored as TOML; relative paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub fewshot: PathBuf,
    pub inputs: PathBuf,
    #[serde(default)]
    pub references: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub sample_seed: u64,
    pub negative_context: PathBuf,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    pub output_dir: PathBuf,
    /// Worker threads for per-item processing; 0 means one per logical core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub provider: ProviderSpec,
    #[serde(default)]
    pub client: ClientSpec,
    #[serde(default)]
    pub classifier: Option<ClassifierSpec>,
    #[serde(default)]
    pub tuning: TuningConfig,
}

fn default_k() -> usize {
    3
}

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Parses and resolves relative paths. Call [`RunConfig::validate`] after
    /// applying any overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.fewshot);
        resolve(base, &mut self.inputs);
        resolve(base, &mut self.negative_context);
        resolve(base, &mut self.output_dir);
        if let Some(p) = &mut self.references {
            resolve(base, p);
        }
        for p in [&mut self.embedding.model, &mut self.embedding.word_vectors, &mut self.embedding.cache]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        for p in &mut self.embedding.conllu {
            resolve(base, p);
        }
        if let ProviderSpec::Toy { path } = &mut self.provider {
            resolve(base, path);
        }
        if let ClientSpec::Canned { path } = &mut self.client {
            resolve(base, path);
        }
        if let Some(ClassifierSpec::Lexicon { path }) = &mut self.classifier {
            resolve(base, path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(ConfigError::Invalid("chunk_size must be at least 1".into()));
        }
        if self.embedding.dim == 0 {
            return Err(ConfigError::Invalid("embedding.dim must be at least 1".into()));
        }
        self.decoding
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("decoding: {e}")))?;
        let mut required: Vec<(&'static str, &Path)> = vec![
            ("fewshot", &self.fewshot),
            ("inputs", &self.inputs),
            ("negative_context", &self.negative_context),
        ];
        if let Some(p) = &self.references {
            required.push(("references", p));
        }
        if let Some(p) = &self.embedding.model {
            required.push(("embedding.model", p));
        }
        if let Some(p) = &self.embedding.word_vectors {
            required.push(("embedding.word_vectors", p));
        }
        for p in &self.embedding.conllu {
            required.push(("embedding.conllu", p));
        }
        if let ProviderSpec::Toy { path } = &self.provider {
            required.push(("provider.path", path));
        }
        if let ClientSpec::Canned { path } = &self.client {
            required.push(("client.path", path));
        }
        if let Some(ClassifierSpec::Lexicon { path }) = &self.classifier {
            required.push(("classifier.path", path));
        }
        for (field, p) in required {
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    field,
                    path: p.display().to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn analysis_settings(&self) -> AnalysisSettings {
        AnalysisSettings {
            model_id: self.analysis.model_id.clone(),
            max_tokens: self.analysis.max_tokens,
            ..AnalysisSettings::default()
        }
    }
}

pub fn build_encoder(cfg: &EmbeddingConfig) -> Result<JointEncoder, PipelineError> {
    let model = match &cfg.model {
        Some(p) => DgcnModel::load(p).map_err(setup("embedding model"))?,
        None => DgcnModel::random(cfg.layers, cfg.dim, cfg.seed),
    };
    let mut graphs = Vec::new();
    for p in &cfg.conllu {
        let text = fs::read_to_string(p).map_err(setup("conllu"))?;
        graphs.extend(read_conllu(&text).map_err(setup(&p.display().to_string()))?);
    }
    let mut encoder = JointEncoder::new(model, Box::new(ConlluIndex::new(graphs)));
    if let Some(p) = &cfg.word_vectors {
        let wv = WordVectors::load(p, encoder.model().dim()).map_err(setup("word vectors"))?;
        encoder = encoder.with_features(FeatureSource::Table(wv));
    }
    if let Some(p) = &cfg.cache {
        let cache = if p.exists() {
            EmbeddingCache::load(p).map_err(setup("embedding cache"))?
        } else {
            EmbeddingCache::new()
        };
        encoder = encoder.with_cache(cache);
    }
    Ok(encoder)
}

pub fn build_provider(spec: &ProviderSpec) -> Result<Box<dyn LogitProvider>, PipelineError> {
    Ok(match spec {
        ProviderSpec::Toy { path } => {
            let lm = ToyLmSpec::load(path).map_err(setup("toy model"))?;
            Box::new(lm.build().map_err(setup("toy model"))?)
        }
        ProviderSpec::Http { endpoint, model_id } => {
            Box::new(HttpLogitProvider::connect(endpoint.clone(), model_id.clone()).map_err(setup("logit provider"))?)
        }
    })
}

pub fn build_client(spec: &ClientSpec) -> Result<Box<dyn TextGenClient>, PipelineError> {
    Ok(match spec {
        ClientSpec::Echo => Box::new(EchoClient),
        ClientSpec::Canned { path } => {
            let text = fs::read_to_string(path).map_err(setup("canned responses"))?;
            let client: CannedClient = serde_json::from_str(&text).map_err(setup("canned responses"))?;
            Box::new(client)
        }
        ClientSpec::Http { endpoint } => Box::new(HttpTextGenClient::new(endpoint.clone()).map_err(setup("analysis client"))?),
    })
}

pub fn build_classifier(spec: &ClassifierSpec) -> Result<Box<dyn StyleClassifier>, PipelineError> {
    Ok(match spec {
        ClassifierSpec::Lexicon { path } => Box::new(LexiconClassifier::load(path).map_err(setup("lexicon"))?),
        ClassifierSpec::Http { endpoint } => Box::new(HttpClassifier::new(endpoint.clone()).map_err(setup("classifier"))?),
    })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(setup("worker pool"))
}

/// Selects `k` representatives from the pool and analyzes each of them.
pub fn prepare_chains(
    pool: &[FewShotPair],
    k: usize,
    seed: u64,
    encoder: &JointEncoder,
    client: &dyn TextGenClient,
    settings: &AnalysisSettings,
) -> Result<Vec<AnalysisChain>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = select_fewshots(pool, k, encoder, &mut rng).map_err(setup("few-shot selection"))?;
    picked
        .par_iter()
        .map(|p| build_chain(p, client, encoder, settings))
        .collect::<Result<Vec<_>, _>>()
        .map_err(setup("analysis"))
}

pub fn prompt_hash(prompt: &SynthesizedPrompt) -> String {
    hex::encode(Sha256::digest(prompt.rendered.as_bytes()))
}

/// Prompt and negative sample for one input; independent of the decoding weights.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub prompt: SynthesizedPrompt,
    pub negative: NegativeSample,
}

pub fn prepare_item(
    index: usize,
    record: &CorpusRecord,
    chains: &[AnalysisChain],
    chunks: &[String],
    encoder: &JointEncoder,
) -> Result<PreparedItem, String> {
    let x = &record.source;
    let x_emb = encoder.embed_text(x, &format!("input{index}")).map_err(|e| format!("embedding input: {e}"))?;
    let ordered = rerank(&x_emb, chains.to_vec()).map_err(|e| e.to_string())?;
    let prompt = assemble_prompt(&record.source_style, &record.target_style, ordered, x).map_err(|e| e.to_string())?;
    let prompt_emb = encoder
        .embed_text(&prompt.rendered, &format!("prompt{index}"))
        .map_err(|e| format!("embedding prompt: {e}"))?;
    let negative = select_negative(chunks, &prompt_emb, encoder).map_err(|e| format!("negative sample: {e}"))?;
    Ok(PreparedItem { prompt, negative })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub index: usize,
    pub input: String,
    pub source_style: String,
    pub target_style: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    /// Few-shot pair ids in prompt order.
    #[serde(default)]
    pub chain_order: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopReason>,
    #[serde(default)]
    pub diagnostics: Vec<StepDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ItemResult {
    fn new(index: usize, record: &CorpusRecord) -> Self {
        Self {
            index,
            input: record.source.clone(),
            source_style: record.source_style.clone(),
            target_style: record.target_style.clone(),
            reference: record.reference.clone(),
            prompt_hash: None,
            chain_order: Vec::new(),
            negative_index: None,
            output: None,
            stop: None,
            diagnostics: Vec::new(),
            error: None,
        }
    }
}

pub fn decode_item(
    index: usize,
    record: &CorpusRecord,
    prepared: &Result<PreparedItem, String>,
    provider: &dyn LogitProvider,
    cfg: &DecodingConfig,
) -> ItemResult {
    let mut item = ItemResult::new(index, record);
    let prepared = match prepared {
        Ok(p) => p,
        Err(e) => {
            item.error = Some(e.clone());
            return item;
        }
    };
    item.prompt_hash = Some(prompt_hash(&prepared.prompt));
    item.chain_order = prepared.prompt.ordered_chains.iter().map(|c| c.pair.id.clone()).collect();
    item.negative_index = Some(prepared.negative.chunk_index);
    match generate(provider, &prepared.prompt, &record.source, &prepared.negative, cfg) {
        Ok(r) => {
            item.output = Some(r.text);
            item.stop = Some(r.stop);
            item.diagnostics = r.steps;
        }
        Err(e) => {
            if let DecodeError::Partial { emitted, .. } = &e {
                warn!("item {index}: partial output {emitted:?}");
            }
            item.error = Some(format!("decoding: {e}"));
        }
    }
    item
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub created_at: u64,
    pub config: RunConfig,
    pub fewshot: Vec<FewShotPair>,
    pub items: Vec<ItemResult>,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let err = |reason: String| PipelineError::Manifest {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let err = |reason: String| PipelineError::Manifest {
            path: path.display().to_string(),
            reason,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| err(e.to_string()))?;
        f.write_all(json.as_bytes()).map_err(|e| err(e.to_string()))?;
        f.write_all(b"\n").map_err(|e| err(e.to_string()))?;
        f.sync_all().map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn load_chunks(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(&cfg.negative_context).map_err(setup("negative context"))?;
    let chunks = split_chunks(&text, cfg.chunk_size, &DEFAULT_SEPARATORS).map_err(setup("negative context"))?;
    if chunks.is_empty() {
        return Err(PipelineError::Setup("negative context has no text".into()));
    }
    Ok(chunks)
}

fn load_inputs(path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    match load_corpus(path) {
        Ok(r) => Ok(r),
        Err(CorpusError::Empty(_)) => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn save_cache(encoder: &JointEncoder, cfg: &EmbeddingConfig) {
    if let (Some(cache), Some(path)) = (encoder.cache(), &cfg.cache) {
        if let Err(e) = cache.save(path) {
            warn!("could not save embedding cache {}: {e}", path.display());
        }
    }
}

/// Shared pieces of a configured run.
pub struct Resources {
    pub encoder: JointEncoder,
    pub provider: Box<dyn LogitProvider>,
    pub client: Box<dyn TextGenClient>,
}

impl Resources {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            encoder: build_encoder(&cfg.embedding)?,
            provider: build_provider(&cfg.provider)?,
            client: build_client(&cfg.client)?,
        })
    }
}

/// Few-shot selection, analysis, and per-input prompt/negative/decoding. The
/// manifest is written to `output_dir/manifest.json`.
pub fn run_transfer(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let res = Resources::from_config(cfg)?;
    run_transfer_with(cfg, &res)
}

pub fn run_transfer_with(cfg: &RunConfig, res: &Resources) -> Result<RunManifest, PipelineError> {
    let records = load_inputs(&cfg.inputs)?;
    let pool = fewshot_pairs(&load_corpus(&cfg.fewshot)?)?;
    let chunks = load_chunks(cfg)?;
    let chains = prepare_chains(
        &pool,
        cfg.k,
        cfg.sample_seed,
        &res.encoder,
        res.client.as_ref(),
        &cfg.analysis_settings(),
    )?;
    info!("{} chains, {} inputs, {} negative chunks", chains.len(), records.len(), chunks.len());
    let workers = thread_pool(cfg.workers)?;
    let items: Vec<ItemResult> = workers.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let prepared = prepare_item(i, r, &chains, &chunks, &res.encoder);
                decode_item(i, r, &prepared, res.provider.as_ref(), &cfg.decoding)
            })
            .collect()
    });
    save_cache(&res.encoder, &cfg.embedding);
    let failures = items.iter().filter(|i| i.error.is_some()).count();
    for item in items.iter().filter(|i| i.error.is_some()) {
        warn!("item {} failed: {}", item.index, item.error.as_deref().unwrap_or_default());
    }
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: now_secs(),
        config: cfg.clone(),
        fewshot: chains.iter().map(|c| c.pair.clone()).collect(),
        items,
        failures,
        report: None,
    };
    manifest.save(&cfg.output_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Accuracy, BLEU against sources and (when available) references, and mean
/// per-output perplexity. Failed items count as empty outputs.
pub fn evaluate_items(
    items: &[ItemResult],
    references: Option<&[String]>,
    classifier: &dyn StyleClassifier,
    provider: &dyn LogitProvider,
) -> Result<EvalReport, PipelineError> {
    if items.is_empty() {
        return Err(PipelineError::Setup("nothing to evaluate".into()));
    }
    let outputs: Vec<String> = items.iter().map(|i| i.output.clone().unwrap_or_default()).collect();
    let sources: Vec<String> = items.iter().map(|i| i.input.clone()).collect();
    let targets: Vec<String> = items.iter().map(|i| i.target_style.clone()).collect();
    let accuracy = style_accuracy_per_item(classifier, &outputs, &targets).map_err(setup("accuracy"))?;
    let s_sbleu = corpus_bleu(&outputs, &sources).map_err(setup("s-sBLEU"))?;
    let r_sbleu = references
        .map(|r| corpus_bleu(&outputs, r))
        .transpose()
        .map_err(setup("r-sBLEU"))?;
    let ppls: Vec<f64> = outputs
        .iter()
        .enumerate()
        .filter_map(|(i, o)| match perplexity(provider, o) {
            Ok(p) => Some(p),
            Err(e) => {
                warn!("no perplexity for item {i}: {e}");
                None
            }
        })
        .collect();
    if ppls.is_empty() {
        return Err(PipelineError::Setup("no output could be scored for perplexity".into()));
    }
    Ok(EvalReport {
        accuracy,
        r_sbleu,
        s_sbleu,
        ppl: ppls.iter().sum::<f64>() / ppls.len() as f64,
        n_items: items.len(),
    })
}

/// References for each item: from `path` (by line, `reference` or else
/// `target`) when given, otherwise from the items. `None` if any is missing.
pub fn collect_references(items: &[ItemResult], path: Option<&Path>) -> Result<Option<Vec<String>>, PipelineError> {
    let refs: Vec<Option<String>> = match path {
        Some(p) => {
            let recs = load_corpus(p)?;
            if recs.len() != items.len() {
                warn!("{} references for {} items; r-sBLEU omitted", recs.len(), items.len());
                return Ok(None);
            }
            recs.into_iter().map(|r| r.reference.or(r.target)).collect()
        }
        None => items.iter().map(|i| i.reference.clone()).collect(),
    };
    if refs.iter().any(Option::is_none) {
        warn!("references missing; r-sBLEU omitted");
        return Ok(None);
    }
    Ok(Some(refs.into_iter().flatten().collect()))
}

/// Scores a finished manifest and writes the report back into it.
pub fn run_eval(manifest_path: &Path, references: Option<&Path>, cfg_override: Option<&RunConfig>) -> Result<EvalReport, PipelineError> {
    let mut manifest = RunManifest::load(manifest_path)?;
    let cfg = cfg_override.unwrap_or(&manifest.config).clone();
    let spec = cfg
        .classifier
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("eval needs a [classifier] section".into()))?;
    let classifier = build_classifier(spec)?;
    let provider = build_provider(&cfg.provider)?;
    let references = references.or(cfg.references.as_deref());
    let refs = collect_references(&manifest.items, references)?;
    let report = evaluate_items(&manifest.items, refs.as_deref(), classifier.as_ref(), provider.as_ref())?;
    manifest.report = Some(report.clone());
    manifest.save(manifest_path)?;
    Ok(report)
}

/// Few-shot representatives the run would use.
pub fn run_sample(cfg: &RunConfig) -> Result<Vec<FewShotPair>, PipelineError> {
    cfg.validate()?;
    let encoder = build_encoder(&cfg.embedding)?;
    let pool = fewshot_pairs(&load_corpus(&cfg.fewshot)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let picked = select_fewshots(&pool, cfg.k, &encoder, &mut rng).map_err(setup("few-shot selection"))?;
    save_cache(&encoder, &cfg.embedding);
    Ok(picked)
}

/// Tunes the contrast weights on the last `tuning.dev_size` pool records; the
/// rest of the pool supplies the few-shot chains. Writes the trace as JSONL.
pub fn run_tune(cfg: &RunConfig) -> Result<TuneOutcome, PipelineError> {
    cfg.validate()?;
    let res = Resources::from_config(cfg)?;
    let spec = cfg
        .classifier
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("tune needs a [classifier] section".into()))?;
    let classifier = build_classifier(spec)?;
    let records = load_corpus(&cfg.fewshot)?;
    let t = &cfg.tuning;
    if t.dev_size == 0 || t.dev_size >= records.len() {
        return Err(ConfigError::Invalid(format!(
            "tuning.dev_size must be in 1..{} for a pool of {}",
            records.len(),
            records.len()
        ))
        .into());
    }
    let split = records.len() - t.dev_size;
    let pool = fewshot_pairs(&records[..split])?;
    let dev: Vec<CorpusRecord> = records[split..]
        .iter()
        .map(|r| CorpusRecord {
            reference: r.reference.clone().or(r.target.clone()),
            ..r.clone()
        })
        .collect();
    let chunks = load_chunks(cfg)?;
    let chains = prepare_chains(
        &pool,
        cfg.k,
        cfg.sample_seed,
        &res.encoder,
        res.client.as_ref(),
        &cfg.analysis_settings(),
    )?;
    let workers = thread_pool(cfg.workers)?;
    let prepared: Vec<Result<PreparedItem, String>> = workers.install(|| {
        dev.par_iter()
            .enumerate()
            .map(|(i, r)| prepare_item(i, r, &chains, &chunks, &res.encoder))
            .collect()
    });
    let bx = SearchBox {
        alpha_range: t.alpha_range,
        beta_range: t.beta_range,
        budget: t.budget,
    };
    let objective = |alpha: f64, beta: f64| -> Result<f64, String> {
        let dcfg = DecodingConfig {
            alpha,
            beta,
            ..cfg.decoding.clone()
        };
        let items: Vec<ItemResult> = workers.install(|| {
            dev.par_iter()
                .zip(&prepared)
                .enumerate()
                .map(|(i, (r, p))| decode_item(i, r, p, res.provider.as_ref(), &dcfg))
                .collect()
        });
        if let Some(bad) = items.iter().find(|i| i.error.is_some()) {
            return Err(bad.error.clone().unwrap_or_default());
        }
        let refs: Vec<String> = dev.iter().map(|r| r.reference.clone().unwrap_or_default()).collect();
        let report = evaluate_items(&items, Some(&refs), classifier.as_ref(), res.provider.as_ref()).map_err(|e| e.to_string())?;
        Ok(composite_objective(
            report.accuracy,
            report.r_sbleu.unwrap_or(0.0),
            report.ppl,
            &t.weights,
        ))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let outcome = optimize(objective, &bx, t.mode, &mut rng).map_err(setup("tuning"))?;
    save_cache(&res.encoder, &cfg.embedding);
    fs::create_dir_all(&cfg.output_dir).map_err(setup("output dir"))?;
    write_trace(&cfg.output_dir.join(TRACE_FILE), &outcome.trace).map_err(setup("trace"))?;
    Ok(outcome)
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub fewshot: Option<PathBuf>,
    pub inputs: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub negative_context: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub sample_seed: Option<u64>,
    pub embed_seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub max_tokens: Option<usize>,
    pub workers: Option<usize>,
    pub cache: Option<PathBuf>,
}

impl Overrides {
    /// Flag paths are taken as given (relative to the working directory).
    pub fn apply(&self, cfg: &mut RunConfig) {
        let set = |dst: &mut PathBuf, src: &Option<PathBuf>| {
            if let Some(p) = src {
                *dst = p.clone();
            }
        };
        set(&mut cfg.fewshot, &self.fewshot);
        set(&mut cfg.inputs, &self.inputs);
        set(&mut cfg.negative_context, &self.negative_context);
        set(&mut cfg.output_dir, &self.output_dir);
        if self.references.is_some() {
            cfg.references = self.references.clone();
        }
        if self.cache.is_some() {
            cfg.embedding.cache = self.cache.clone();
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.sample_seed {
            cfg.sample_seed = v;
        }
        if let Some(v) = self.embed_seed {
            cfg.embedding.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.decoding.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.decoding.beta = v;
        }
        if let Some(v) = self.max_tokens {
            cfg.decoding.max_tokens = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
    }
}
