//! Gated directed graph convolution over dependency graphs, pooled into
//! sentence vectors.
//!
//! Every dependency edge `head -> dependent` with label `r` is augmented with an
//! inverse edge `dependent -> head` labeled `rev:r`, and every node gets a
//! `self` loop. A layer updates node `i` as
//!
//! ```text
//! h_i' = relu( sum_{(j, r) in in_edges(i)} gate(i, r) * (W_r h_j + b_r) )
//! gate(i, r) = sigmoid(g_r . h_i + c_r)
//! ```
//!
//! and a sentence vector is the mean of the final node states.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::FewShotPair;
use crate::graph::DependencyGraph;
use crate::text::SentenceParser;

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_DIM: usize = 64;
pub const SELF_RELATION: &str = "self";
pub const UNKNOWN_RELATION: &str = "unk";

/// Universal Dependencies v2 relation inventory used for the default vocabulary.
pub const UD_RELATIONS: &[&str] = &[
    "acl", "advcl", "advmod", "amod", "appos", "aux", "case", "cc", "ccomp", "clf", "compound",
    "conj", "cop", "csubj", "dep", "det", "discourse", "dislocated", "expl", "fixed", "flat",
    "goeswith", "iobj", "list", "mark", "nmod", "nsubj", "nummod", "obj", "obl", "orphan",
    "parataxis", "punct", "reparandum", "root", "vocative", "xcomp",
];

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{0} produced no parseable sentence")]
    Unparseable(String),
    #[error("invalid graph: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("model parameters: {0}")]
    BadModel(String),
    #[error("word vectors line {line}: {reason}")]
    WordVectors { line: usize, reason: String },
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Row-major `rows x dim` matrix of node states.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(EmbedError::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
    pub source_id: String,
}

impl SentenceEmbedding {
    pub fn new(values: Vec<f64>, source_id: impl Into<String>) -> Self {
        Self {
            values,
            source_id: source_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Element-wise mean of non-empty, equal-dimension embeddings.
    pub fn mean(items: &[SentenceEmbedding], source_id: impl Into<String>) -> Result<Self, EmbedError> {
        let first = items
            .first()
            .ok_or_else(|| EmbedError::Unparseable("empty embedding list".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for e in items {
            if e.dim() != acc.len() {
                return Err(EmbedError::DimMismatch {
                    expected: acc.len(),
                    found: e.dim(),
                });
            }
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(Self::new(acc, source_id))
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<f64, EmbedError> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Relation vocabulary and parameters
// ---------------------------------------------------------------------------

/// Label → id map. Always contains `self`, `unk`, and a `rev:` twin of every
/// non-self label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationVocab {
    labels: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl RelationVocab {
    pub fn new<S: AsRef<str>>(base: &[S]) -> Self {
        let mut labels = vec![SELF_RELATION.to_string()];
        let push = |l: String, labels: &mut Vec<String>| {
            if !labels.contains(&l) {
                labels.push(l);
            }
        };
        for l in base.iter().map(|s| s.as_ref()).chain([UNKNOWN_RELATION]) {
            if l == SELF_RELATION || l.starts_with("rev:") {
                continue;
            }
            push(l.to_string(), &mut labels);
            push(format!("rev:{l}"), &mut labels);
        }
        Self::from_labels(labels)
    }

    fn from_labels(labels: Vec<String>) -> Self {
        let ids = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, ids }
    }

    fn rebuild_index(&mut self) {
        self.ids = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    /// Canonical label for a DEPREL: exact match, then the part before a `:`
    /// subtype, then `unk`.
    pub fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        if self.ids.contains_key(label) && label != SELF_RELATION && !label.starts_with("rev:") {
            return label;
        }
        if let Some((base, _)) = label.split_once(':') {
            if self.ids.contains_key(base) && base != "rev" {
                return base;
            }
        }
        UNKNOWN_RELATION
    }

    /// (forward id, inverse id) for a dependency label.
    pub fn resolve(&self, label: &str) -> (usize, usize) {
        let canon = self.canonical(label);
        let fwd = self.ids[canon];
        let rev = self.ids[&format!("rev:{canon}")];
        (fwd, rev)
    }

    pub fn self_id(&self) -> usize {
        self.ids[SELF_RELATION]
    }
}

impl Default for RelationVocab {
    fn default() -> Self {
        Self::new(UD_RELATIONS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationParams {
    /// `dim x dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gate_weight: Vec<f64>,
    pub gate_bias: f64,
}

impl RelationParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
            gate_weight: vec![0.0; dim],
            gate_bias: 0.0,
        }
    }

    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
        };
        let weight = draw(dim * dim);
        let bias = draw(dim);
        let gate_weight = draw(dim);
        let gate_bias = draw(1)[0];
        Self {
            weight,
            bias,
            gate_weight,
            gate_bias,
        }
    }

    fn check(&self, dim: usize) -> Result<(), String> {
        if self.weight.len() != dim * dim || self.bias.len() != dim || self.gate_weight.len() != dim
        {
            return Err(format!("relation parameter shapes do not match dim {dim}"));
        }
        let finite = self
            .weight
            .iter()
            .chain(&self.bias)
            .chain(&self.gate_weight)
            .chain(std::iter::once(&self.gate_bias))
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite parameter".into());
        }
        Ok(())
    }
}

/// Parameters of one convolution layer, indexed by relation id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub relations: Vec<RelationParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgcnModel {
    dim: usize,
    rng_seed: u64,
    relation_vocab: RelationVocab,
    layers: Vec<LayerParams>,
}

impl DgcnModel {
    /// Seeded random model over the UD relation inventory.
    pub fn random(num_layers: usize, dim: usize, seed: u64) -> Self {
        Self::random_with_vocab(num_layers, dim, seed, RelationVocab::default())
    }

    /// Each (layer, relation label) pair draws from its own stream, so adding a
    /// label never perturbs the others.
    pub fn random_with_vocab(num_layers: usize, dim: usize, seed: u64, vocab: RelationVocab) -> Self {
        assert!(dim >= 1, "dim must be >= 1");
        let layers = (0..num_layers)
            .map(|layer| LayerParams {
                relations: vocab
                    .labels()
                    .iter()
                    .map(|label| {
                        let mut rng = ChaCha8Rng::seed_from_u64(param_stream_seed(seed, layer, label));
                        RelationParams::random(dim, &mut rng)
                    })
                    .collect(),
            })
            .collect();
        Self {
            dim,
            rng_seed: seed,
            relation_vocab: vocab,
            layers,
        }
    }

    /// All parameters zero.
    pub fn zeros(num_layers: usize, dim: usize, seed: u64) -> Self {
        let vocab = RelationVocab::default();
        let layers = (0..num_layers)
            .map(|_| LayerParams {
                relations: vec![RelationParams::zeros(dim); vocab.len()],
            })
            .collect();
        Self {
            dim,
            rng_seed: seed,
            relation_vocab: vocab,
            layers,
        }
    }

    pub fn from_parts(
        dim: usize,
        rng_seed: u64,
        relation_vocab: RelationVocab,
        layers: Vec<LayerParams>,
    ) -> Result<Self, EmbedError> {
        let model = Self {
            dim,
            rng_seed,
            relation_vocab,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::BadModel("dim must be >= 1".into()));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.relations.len() != self.relation_vocab.len() {
                return Err(EmbedError::BadModel(format!(
                    "layer {li} has {} relations, vocabulary has {}",
                    layer.relations.len(),
                    self.relation_vocab.len()
                )));
            }
            for (ri, p) in layer.relations.iter().enumerate() {
                p.check(self.dim).map_err(|e| {
                    EmbedError::BadModel(format!(
                        "layer {li} relation {}: {e}",
                        self.relation_vocab.labels()[ri]
                    ))
                })?;
            }
        }
        for required in [SELF_RELATION, UNKNOWN_RELATION, "rev:unk"] {
            if self.relation_vocab.id(required).is_none() {
                return Err(EmbedError::BadModel(format!("vocabulary lacks {required:?}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn relation_vocab(&self) -> &RelationVocab {
        &self.relation_vocab
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerParams {
        &mut self.layers[i]
    }

    pub fn relation_params_mut(&mut self, layer: usize, label: &str) -> Option<&mut RelationParams> {
        let id = self.relation_vocab.id(label)?;
        self.layers.get_mut(layer).map(|l| &mut l.relations[id])
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads externally trained weights written by [`DgcnModel::save`].
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let mut model: Self = serde_json::from_slice(&fs::read(path)?)?;
        model.relation_vocab.rebuild_index();
        model.validate()?;
        Ok(model)
    }
}

fn param_stream_seed(seed: u64, layer: usize, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((layer as u64).to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Initial node features
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded token vector: FNV-1a of the token bytes xor `seed * golden-gamma`
/// seeds a SplitMix64 stream; each output maps its top 53 bits to `[-1, 1]`.
pub fn hash_feature(token: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut state = fnv1a64(token.as_bytes()) ^ seed.wrapping_mul(GOLDEN_GAMMA);
    (0..dim)
        .map(|_| {
            let unit = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            2.0 * unit - 1.0
        })
        .collect()
}

/// Word → vector table read from `token v1 v2 ... vd` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordVectors {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, v: Vec<f64>) -> Result<(), EmbedError> {
        if v.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        self.table.insert(token.into(), v);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.table.get(token).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn parse(reader: impl BufRead, dim: usize) -> Result<Self, EmbedError> {
        let mut out = Self::new(dim);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EmbedError::WordVectors {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if values.len() != dim || values.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::WordVectors {
                    line: i + 1,
                    reason: format!("expected {dim} finite values, found {}", values.len()),
                });
            }
            out.table.insert(token.to_string(), values);
        }
        Ok(out)
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self, EmbedError> {
        Self::parse(io::BufReader::new(fs::File::open(path)?), dim)
    }

    fn fingerprint(&self) -> u64 {
        let mut keys: Vec<_> = self.table.keys().collect();
        keys.sort();
        let mut h = Sha256::new();
        for k in keys {
            h.update(k.as_bytes());
            h.update([0]);
            for v in &self.table[k] {
                h.update(v.to_le_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Default)]
pub enum FeatureSource {
    #[default]
    Hash,
    Table(WordVectors),
}

impl FeatureSource {
    fn fingerprint(&self) -> u64 {
        match self {
            FeatureSource::Hash => 0,
            FeatureSource::Table(t) => t.fingerprint(),
        }
    }
}

/// Initial `|nodes| x dim` states. Table misses fall back to [`hash_feature`].
pub fn init_node_features(
    graph: &DependencyGraph,
    source: &FeatureSource,
    seed: u64,
    dim: usize,
) -> Result<FeatureMatrix, EmbedError> {
    let rows = graph
        .nodes
        .iter()
        .map(|tok| match source {
            FeatureSource::Table(t) if t.dim() != dim => Err(EmbedError::DimMismatch {
                expected: dim,
                found: t.dim(),
            }),
            FeatureSource::Table(t) => Ok(t
                .get(tok)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| hash_feature(tok, seed, dim))),
            FeatureSource::Hash => Ok(hash_feature(tok, seed, dim)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    FeatureMatrix::from_rows(rows)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Incoming augmented edge: message from `source` under relation `relation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InEdge {
    pub source: usize,
    pub relation: usize,
}

/// Per-node incoming edges after adding self loops and inverse edges.
pub fn augmented_in_edges(graph: &DependencyGraph, vocab: &RelationVocab) -> Vec<Vec<InEdge>> {
    let self_id = vocab.self_id();
    let mut incoming: Vec<Vec<InEdge>> = (0..graph.len())
        .map(|i| {
            vec![InEdge {
                source: i,
                relation: self_id,
            }]
        })
        .collect();
    for e in &graph.edges {
        let (fwd, rev) = vocab.resolve(&e.label);
        incoming[e.dependent].push(InEdge {
            source: e.head,
            relation: fwd,
        });
        incoming[e.head].push(InEdge {
            source: e.dependent,
            relation: rev,
        });
    }
    incoming
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate value for message into node state `h_i` under `params`.
pub fn edge_gate(params: &RelationParams, h_i: &[f64]) -> f64 {
    let z: f64 = params.gate_weight.iter().zip(h_i).map(|(w, h)| w * h).sum::<f64>() + params.gate_bias;
    sigmoid(z)
}

/// One gated graph convolution over pre-computed augmented in-edges.
pub fn dgcn_layer(
    features: &FeatureMatrix,
    in_edges: &[Vec<InEdge>],
    layer: &LayerParams,
    dim: usize,
) -> Result<FeatureMatrix, EmbedError> {
    if features.dim() != dim {
        return Err(EmbedError::DimMismatch {
            expected: dim,
            found: features.dim(),
        });
    }
    if features.rows() != in_edges.len() {
        return Err(EmbedError::DimMismatch {
            expected: in_edges.len(),
            found: features.rows(),
        });
    }
    let mut out = FeatureMatrix::zeros(features.rows(), dim);
    let mut msg = vec![0.0; dim];
    for (i, edges) in in_edges.iter().enumerate() {
        let h_i = features.row(i);
        let acc = out.row_mut(i);
        for edge in edges {
            let p = layer.relations.get(edge.relation).ok_or_else(|| {
                EmbedError::BadModel(format!("relation id {} out of range", edge.relation))
            })?;
            let gate = edge_gate(p, h_i);
            let h_j = features.row(edge.source);
            for (r, m) in msg.iter_mut().enumerate() {
                let w = &p.weight[r * dim..(r + 1) * dim];
                *m = w.iter().zip(h_j).map(|(a, b)| a * b).sum::<f64>() + p.bias[r];
            }
            for (a, m) in acc.iter_mut().zip(&msg) {
                *a += gate * m;
            }
        }
        acc.iter_mut().for_each(|a| *a = a.max(0.0));
    }
    Ok(out)
}

/// Runs every layer and average-pools the final node states.
pub fn embed_sentence_with(
    graph: &DependencyGraph,
    model: &DgcnModel,
    features: &FeatureSource,
) -> Result<SentenceEmbedding, EmbedError> {
    graph.validate()?;
    let mut h = init_node_features(graph, features, model.seed(), model.dim())?;
    let in_edges = augmented_in_edges(graph, model.relation_vocab());
    for layer in &model.layers {
        h = dgcn_layer(&h, &in_edges, layer, model.dim())?;
    }
    Ok(SentenceEmbedding::new(h.mean_row(), graph.sentence_id.clone()))
}

/// [`embed_sentence_with`] using the hash feature initializer.
pub fn embed_sentence(graph: &DependencyGraph, model: &DgcnModel) -> Result<SentenceEmbedding, EmbedError> {
    embed_sentence_with(graph, model, &FeatureSource::Hash)
}

/// Mean of the two side embeddings. Each side may span several sentences, in
/// which case its embedding is the mean over them.
pub fn embed_pair_graphs(
    source: &[DependencyGraph],
    target: &[DependencyGraph],
    model: &DgcnModel,
    features: &FeatureSource,
    pair_id: &str,
) -> Result<SentenceEmbedding, EmbedError> {
    let side = |graphs: &[DependencyGraph], name: &str| -> Result<SentenceEmbedding, EmbedError> {
        if graphs.is_empty() {
            return Err(EmbedError::Unparseable(format!("pair {pair_id} {name} side")));
        }
        let embs = graphs
            .iter()
            .map(|g| embed_sentence_with(g, model, features))
            .collect::<Result<Vec<_>, _>>()?;
        SentenceEmbedding::mean(&embs, format!("{pair_id}:{name}"))
    };
    let s = side(source, "source")?;
    let t = side(target, "target")?;
    SentenceEmbedding::mean(&[s, t], pair_id)
}

// ---------------------------------------------------------------------------
// Cache and encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub sentence_hash: u64,
    pub seed: u64,
    pub layers: u32,
    pub dim: u32,
}

const CACHE_MAGIC: &[u8; 8] = b"SCEMB\x00\x01\x00";

/// Sentence-embedding cache, persisted as a little-endian binary file:
/// magic, entry count, then `(hash, seed, layers, dim, dim x f64)` records.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: Mutex<HashMap<CacheKey, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<Vec<f64>> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, values: Vec<f64>) {
        self.entries.lock().expect("cache lock").insert(key, values);
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), EmbedError> {
        let entries = self.entries.lock().expect("cache lock");
        let mut keys: Vec<_> = entries.keys().copied().collect();
        keys.sort_by_key(|k| (k.sentence_hash, k.seed, k.layers, k.dim));
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(keys.len() as u64).to_le_bytes())?;
        for k in keys {
            w.write_all(&k.sentence_hash.to_le_bytes())?;
            w.write_all(&k.seed.to_le_bytes())?;
            w.write_all(&k.layers.to_le_bytes())?;
            w.write_all(&k.dim.to_le_bytes())?;
            for v in &entries[&k] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, EmbedError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = buf.as_slice();
        let mut take = |n: usize| -> Result<&[u8], EmbedError> {
            if cur.len() < n {
                return Err(EmbedError::Cache("truncated file".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CACHE_MAGIC {
            return Err(EmbedError::Cache("bad magic".into()));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let count = u64_at(take(8)?);
        let mut map = HashMap::new();
        for _ in 0..count {
            let key = CacheKey {
                sentence_hash: u64_at(take(8)?),
                seed: u64_at(take(8)?),
                layers: u32_at(take(4)?),
                dim: u32_at(take(4)?),
            };
            let values = (0..key.dim)
                .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect::<Result<Vec<_>, _>>()?;
            map.insert(key, values);
        }
        Ok(Self {
            entries: Mutex::new(map),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}

fn graph_hash(graph: &DependencyGraph, feature_fingerprint: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(feature_fingerprint.to_le_bytes());
    for n in &graph.nodes {
        h.update(n.as_bytes());
        h.update([0]);
    }
    h.update([1]);
    for e in &graph.edges {
        h.update((e.head as u64).to_le_bytes());
        h.update((e.dependent as u64).to_le_bytes());
        h.update(e.label.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Bundles a model with its feature source, a text parser and an optional cache,
/// so callers can embed raw sentences, multi-sentence text, and pairs.
pub struct JointEncoder {
    model: DgcnModel,
    features: FeatureSource,
    parser: Box<dyn SentenceParser>,
    cache: Option<EmbeddingCache>,
}

impl JointEncoder {
    pub fn new(model: DgcnModel, parser: Box<dyn SentenceParser>) -> Self {
        Self {
            model,
            features: FeatureSource::Hash,
            parser,
            cache: None,
        }
    }

    pub fn with_features(mut self, features: FeatureSource) -> Self {
        self.features = features;
        self
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn model(&self) -> &DgcnModel {
        &self.model
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    pub fn parse(&self, text: &str, id: &str) -> Vec<DependencyGraph> {
        self.parser.parse(text, id)
    }

    pub fn embed_graph(&self, graph: &DependencyGraph) -> Result<SentenceEmbedding, EmbedError> {
        let Some(cache) = &self.cache else {
            return embed_sentence_with(graph, &self.model, &self.features);
        };
        let key = CacheKey {
            sentence_hash: graph_hash(graph, self.features.fingerprint()),
            seed: self.model.seed(),
            layers: self.model.num_layers() as u32,
            dim: self.model.dim() as u32,
        };
        if let Some(values) = cache.get(&key) {
            return Ok(SentenceEmbedding::new(values, graph.sentence_id.clone()));
        }
        let emb = embed_sentence_with(graph, &self.model, &self.features)?;
        cache.insert(key, emb.values.clone());
        Ok(emb)
    }

    /// Mean of per-sentence embeddings of `text`.
    pub fn embed_text(&self, text: &str, id: &str) -> Result<SentenceEmbedding, EmbedError> {
        let graphs = self.parser.parse(text, id);
        if graphs.is_empty() {
            return Err(EmbedError::Unparseable(id.to_string()));
        }
        let embs = graphs
            .iter()
            .map(|g| self.embed_graph(g))
            .collect::<Result<Vec<_>, _>>()?;
        SentenceEmbedding::mean(&embs, id)
    }

    pub fn embed_pair(&self, pair: &FewShotPair) -> Result<SentenceEmbedding, EmbedError> {
        let side = |text: &str, name: &str| {
            self.embed_text(text, &format!("{}:{name}", pair.id))
                .map_err(|e| match e {
                    EmbedError::Unparseable(_) => {
                        EmbedError::Unparseable(format!("pair {} {name} side", pair.id))
                    }
                    other => other,
                })
        };
        let s = side(&pair.source, "source")?;
        let t = side(&pair.target, "target")?;
        SentenceEmbedding::mean(&[s, t], pair.id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use approx::assert_abs_diff_eq;

    fn graph(nodes: &[&str], edges: &[(usize, usize, &str)]) -> DependencyGraph {
        DependencyGraph::new(
            "g",
            nodes.iter().map(|s| s.to_string()).collect(),
            edges.iter().map(|&(h, d, l)| Edge::new(h, d, l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e = |v: &[f64]| SentenceEmbedding::new(v.to_vec(), "");
        assert_abs_diff_eq!(cosine_similarity(&e(&[3.0, 4.0]), &e(&[3.0, 4.0])).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&e(&[1.0, 0.0]), &e(&[1.0, 1.0])).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_eq!(cosine_similarity(&e(&[0.0, 0.0]), &e(&[1.0, 1.0])).unwrap(), 0.0);
        assert!(cosine_similarity(&e(&[1.0]), &e(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn hash_features_are_deterministic_and_bounded() {
        let g = graph(&["joy", "and", "joy"], &[(0, 1, "cc"), (0, 2, "conj")]);
        let f = init_node_features(&g, &FeatureSource::Hash, 42, 16).unwrap();
        assert_eq!(f.row(0), f.row(2));
        assert_ne!(f.row(0), f.row(1));
        assert!(f.row(1).iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(hash_feature("joy", 42, 4), hash_feature("joy", 43, 4));
    }

    #[test]
    fn table_lookup_with_hash_fallback() {
        let mut table = WordVectors::new(3);
        table.insert("happy", vec![0.5, -0.25, 2.0]).unwrap();
        let g = graph(&["happy", "day"], &[(1, 0, "amod")]);
        let f = init_node_features(&g, &FeatureSource::Table(table), 9, 3).unwrap();
        assert_eq!(f.row(0), &[0.5, -0.25, 2.0]);
        assert_eq!(f.row(1), hash_feature("day", 9, 3).as_slice());
    }

    #[test]
    fn word_vector_file_parsing() {
        let text = "good 1 2\nbad -1 0.5\n";
        let wv = WordVectors::parse(text.as_bytes(), 2).unwrap();
        assert_eq!(wv.get("bad"), Some(&[-1.0, 0.5][..]));
        let err = WordVectors::parse("x 1\n".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, EmbedError::WordVectors { line: 1, .. }));
    }

    #[test]
    fn zero_model_collapses_to_zero() {
        let model = DgcnModel::zeros(2, 8, 1);
        let g = graph(&["a", "b", "c"], &[(0, 1, "nsubj"), (0, 2, "obj")]);
        let emb = embed_sentence(&g, &model).unwrap();
        assert!(emb.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_identity_weight_halves_input() {
        let mut model = DgcnModel::zeros(1, 2, 0);
        let p = model.relation_params_mut(0, SELF_RELATION).unwrap();
        p.weight = vec![1.0, 0.0, 0.0, 1.0];
        let g = graph(&["x"], &[]);
        let h = FeatureMatrix::from_rows(vec![vec![2.0, -2.0]]).unwrap();
        let edges = augmented_in_edges(&g, model.relation_vocab());
        let out = dgcn_layer(&h, &edges, model.layer(0), 2).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn layer_rejects_dim_mismatch() {
        let model = DgcnModel::zeros(1, 3, 0);
        let g = graph(&["x"], &[]);
        let h = FeatureMatrix::from_rows(vec![vec![1.0, 1.0]]).unwrap();
        let edges = augmented_in_edges(&g, model.relation_vocab());
        assert!(matches!(
            dgcn_layer(&h, &edges, model.layer(0), 3),
            Err(EmbedError::DimMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn zero_layers_returns_initial_features() {
        let model = DgcnModel::random(0, 5, 3);
        let g = graph(&["solo"], &[]);
        let emb = embed_sentence(&g, &model).unwrap();
        assert_eq!(emb.values, hash_feature("solo", 3, 5));
    }

    #[test]
    fn unknown_and_subtyped_labels_resolve() {
        let vocab = RelationVocab::default();
        assert_eq!(vocab.canonical("nmod:poss"), "nmod");
        assert_eq!(vocab.canonical("made-up"), UNKNOWN_RELATION);
        assert_eq!(vocab.canonical("self"), UNKNOWN_RELATION);
        let (f, r) = vocab.resolve("zzz");
        assert_eq!(vocab.labels()[f], "unk");
        assert_eq!(vocab.labels()[r], "rev:unk");
    }

    #[test]
    fn augmentation_adds_self_and_inverse() {
        let vocab = RelationVocab::default();
        let g = graph(&["a", "b"], &[(0, 1, "amod")]);
        let inc = augmented_in_edges(&g, &vocab);
        assert_eq!(inc[0].len(), 2);
        assert_eq!(inc[1].len(), 2);
        assert_eq!(inc[0][1].source, 1);
        assert_eq!(vocab.labels()[inc[0][1].relation], "rev:amod");
        assert_eq!(vocab.labels()[inc[1][1].relation], "amod");
    }

    #[test]
    fn pair_embedding_is_side_mean() {
        let model = DgcnModel::random(2, 6, 11);
        let a = graph(&["good", "food"], &[(1, 0, "amod")]);
        let b = graph(&["bad", "service", "here"], &[(1, 0, "amod"), (1, 2, "advmod")]);
        let same = embed_pair_graphs(std::slice::from_ref(&a), std::slice::from_ref(&a), &model, &FeatureSource::Hash, "p").unwrap();
        assert_eq!(same.values, embed_sentence(&a, &model).unwrap().values);
        let mixed = embed_pair_graphs(std::slice::from_ref(&a), std::slice::from_ref(&b), &model, &FeatureSource::Hash, "p").unwrap();
        let ea = embed_sentence(&a, &model).unwrap();
        let eb = embed_sentence(&b, &model).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(mixed.values[i], 0.5 * (ea.values[i] + eb.values[i]), epsilon = 1e-15);
        }
        let err = embed_pair_graphs(&[a], &[], &model, &FeatureSource::Hash, "p7").unwrap_err();
        assert!(err.to_string().contains("target"));
    }

    #[test]
    fn opposite_side_embeddings_cancel() {
        let v = SentenceEmbedding::new(vec![0.3, -1.2, 4.0], "v");
        let neg = SentenceEmbedding::new(v.values.iter().map(|x| -x).collect(), "-v");
        assert_eq!(SentenceEmbedding::mean(&[v, neg], "p").unwrap().values, vec![0.0; 3]);
    }

    #[test]
    fn model_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = DgcnModel::random(1, 3, 5);
        model.save(&path).unwrap();
        let back = DgcnModel::load(&path).unwrap();
        assert_eq!(back.relation_vocab().id("rev:amod"), model.relation_vocab().id("rev:amod"));
        let g = graph(&["a", "b"], &[(0, 1, "amod")]);
        assert_eq!(embed_sentence(&g, &model).unwrap(), embed_sentence(&g, &back).unwrap());
    }

    #[test]
    fn load_rejects_non_finite_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut model = DgcnModel::random(1, 2, 5);
        model.layer_mut(0).relations[0].weight[0] = f64::NAN;
        // serde_json writes NaN as null, which fails to deserialize into f64.
        model.save(&path).unwrap();
        assert!(DgcnModel::load(&path).is_err());
    }

    #[test]
    fn cache_round_trip_and_hits_match_cold_run() {
        let model = DgcnModel::random(2, 4, 8);
        let cold = JointEncoder::new(model.clone(), Box::new(crate::text::FlatParser));
        let warm = JointEncoder::new(model, Box::new(crate::text::FlatParser)).with_cache(EmbeddingCache::new());
        let text = "The soup was cold. Service was slow!";
        let first = warm.embed_text(text, "t").unwrap();
        assert_eq!(warm.cache().unwrap().len(), 2);
        let second = warm.embed_text(text, "t").unwrap();
        assert_eq!(first, second);
        assert_eq!(first, cold.embed_text(text, "t").unwrap());

        let mut buf = Vec::new();
        warm.cache().unwrap().write_to(&mut buf).unwrap();
        let loaded = EmbeddingCache::read_from(buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(EmbeddingCache::read_from(&buf[..buf.len() - 3]).is_err());
    }
}
