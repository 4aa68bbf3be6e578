//! Python bindings for the style-transfer library.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sc::decode::{
    generate_from_state, DecodingConfig, GenerationState, LogProbVector, LogitProvider, RoutedProvider, ToyLmSpec,
    DEFAULT_LOGPROB_FLOOR, DEFAULT_PLAUSIBILITY,
};
use sc::embed::{embed_sentence, DgcnModel, JointEncoder};
use sc::graph::{DependencyGraph, Edge};
use sc::pipeline::{run_eval, run_transfer, RunConfig, MANIFEST_FILE};
use sc::sampler::{select_representatives, PointSet, DEFAULT_MAX_ITER, DEFAULT_TOL};
use sc::text::FlatParser;
use sc::tuner::{optimize as tune, SearchBox, SearchMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A dependency graph: token forms plus (head, dependent, label) edges, 0-based.
#[pyclass(name = "Graph", from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: DependencyGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (nodes, edges, sentence_id = "g".to_string()))]
    fn new(nodes: Vec<String>, edges: Vec<(usize, usize, String)>, sentence_id: String) -> PyResult<Self> {
        let edges = edges.into_iter().map(|(h, d, l)| Edge::new(h, d, l)).collect();
        Ok(Self {
            inner: DependencyGraph::new(sentence_id, nodes, edges).map_err(value_err)?,
        })
    }

    #[getter]
    fn sentence_id(&self) -> String {
        self.inner.sentence_id.clone()
    }

    #[getter]
    fn nodes(&self) -> Vec<String> {
        self.inner.nodes.clone()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize, String)> {
        self.inner.edges.iter().map(|e| (e.head, e.dependent, e.label.clone())).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.nodes.len()
    }

    fn __repr__(&self) -> String {
        format!("Graph({:?}, {} nodes, {} edges)", self.inner.sentence_id, self.inner.nodes.len(), self.inner.edges.len())
    }
}

#[pyfunction]
fn read_conllu(text: &str) -> PyResult<Vec<PyGraph>> {
    Ok(sc::graph::read_conllu(text)
        .map_err(value_err)?
        .into_iter()
        .map(|inner| PyGraph { inner })
        .collect())
}

/// Graph-convolution sentence encoder with hashed token features.
#[pyclass(name = "Embedder")]
struct PyEmbedder {
    encoder: JointEncoder,
}

#[pymethods]
impl PyEmbedder {
    #[new]
    #[pyo3(signature = (layers = 2, dim = 64, seed = 0))]
    fn new(layers: usize, dim: usize, seed: u64) -> PyResult<Self> {
        if dim == 0 {
            return Err(PyValueError::new_err("dim must be at least 1"));
        }
        Ok(Self {
            encoder: JointEncoder::new(DgcnModel::random(layers, dim, seed), Box::new(FlatParser)),
        })
    }

    fn embed_graph(&self, graph: &PyGraph) -> PyResult<Vec<f64>> {
        Ok(embed_sentence(&graph.inner, self.encoder.model()).map_err(value_err)?.values)
    }

    /// Mean over the sentences of `text`, each parsed as a flat chain.
    fn embed_text(&self, text: &str) -> PyResult<Vec<f64>> {
        Ok(self.encoder.embed_text(text, "py").map_err(value_err)?.values)
    }
}

/// Indices of `k` representative vectors (seeding, Lloyd refinement, nearest point).
#[pyfunction]
#[pyo3(signature = (vectors, k, seed = 0))]
fn select(vectors: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    let points = PointSet::from_vectors(vectors).map_err(value_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(select_representatives(&points, k, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut rng)
        .map_err(value_err)?
        .representative_indices)
}

#[pyfunction]
fn log_softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(sc::decode::log_softmax(&logits).map_err(value_err)?.0)
}

/// Contrastive combination of three log-probability vectors.
#[pyfunction]
#[pyo3(signature = (lp_prompt, lp_plain, lp_negative, alpha = 5.0, beta = 5.0, epsilon = DEFAULT_PLAUSIBILITY, floor = DEFAULT_LOGPROB_FLOOR))]
fn combine(
    lp_prompt: Vec<f64>,
    lp_plain: Vec<f64>,
    lp_negative: Vec<f64>,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    floor: f64,
) -> PyResult<Vec<f64>> {
    let cfg = DecodingConfig {
        alpha,
        beta,
        plausibility_epsilon: epsilon,
        logprob_floor: floor,
        ..DecodingConfig::default()
    };
    cfg.validate().map_err(value_err)?;
    let out = sc::decode::combine(
        &LogProbVector(lp_prompt),
        &LogProbVector(lp_plain),
        &LogProbVector(lp_negative),
        &cfg,
    )
    .map_err(value_err)?;
    Ok(out.0)
}

#[pyfunction]
#[pyo3(signature = (text, chunk_size = 256))]
fn split_chunks(text: &str, chunk_size: usize) -> PyResult<Vec<String>> {
    sc::negative::split_chunks(text, chunk_size, &sc::negative::DEFAULT_SEPARATORS).map_err(value_err)
}

#[pyfunction]
fn bleu(candidate: &str, references: Vec<String>) -> f64 {
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    sc::eval::bleu(candidate, &refs)
}

#[pyfunction]
fn corpus_bleu(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    sc::eval::corpus_bleu(&candidates, &references).map_err(value_err)
}

/// Table-driven language model loaded from a JSON description.
#[pyclass(name = "ToyModel")]
struct PyToyModel {
    provider: RoutedProvider,
}

#[pymethods]
impl PyToyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let spec = ToyLmSpec::load(&path).map_err(value_err)?;
        Ok(Self {
            provider: spec.build().map_err(value_err)?,
        })
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.provider.vocab().tokens().to_vec()
    }

    fn perplexity(&self, text: &str) -> PyResult<f64> {
        sc::eval::perplexity(&self.provider, text).map_err(value_err)
    }

    /// Greedy contrastive continuation of three raw-text contexts.
    #[pyo3(signature = (prompt, plain, negative, alpha = 5.0, beta = 5.0, max_tokens = 32))]
    fn generate(&self, prompt: &str, plain: &str, negative: &str, alpha: f64, beta: f64, max_tokens: usize) -> PyResult<String> {
        let cfg = DecodingConfig {
            alpha,
            beta,
            max_tokens,
            ..DecodingConfig::default()
        };
        let vocab = self.provider.vocab();
        let enc = |t: &str| vocab.encode(t).map_err(value_err);
        let state = GenerationState::new(enc(prompt)?, enc(plain)?, enc(negative)?, &cfg);
        Ok(generate_from_state(&self.provider, state, &cfg).map_err(runtime_err)?.text)
    }
}

/// Maximizes `objective(alpha, beta)`; returns (alpha, beta, value) of the best
/// trial and the full trace. Exceptions raised by the objective count as failed
/// trials.
#[pyfunction]
#[pyo3(signature = (objective, budget = 30, seed = 0, alpha_range = (0.0, 10.0), beta_range = (0.0, 10.0), random = false))]
#[allow(clippy::type_complexity)]
fn optimize(
    objective: &Bound<'_, PyAny>,
    budget: usize,
    seed: u64,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
    random: bool,
) -> PyResult<((f64, f64, f64), Vec<(f64, f64, f64)>)> {
    let bx = SearchBox {
        alpha_range,
        beta_range,
        budget,
    };
    let mode = if random { SearchMode::Random } else { SearchMode::GaussianProcess };
    let out = tune(
        |a, b| objective.call1((a, b)).and_then(|v| v.extract::<f64>()).map_err(|e| e.to_string()),
        &bx,
        mode,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .map_err(value_err)?;
    let b = &out.best;
    Ok((
        (b.alpha, b.beta, b.objective_value),
        out.trace.iter().map(|t| (t.alpha, t.beta, t.objective_value)).collect(),
    ))
}

/// Runs `transfer` for a TOML config; returns the manifest path and the outputs
/// (None for failed items).
#[pyfunction]
#[pyo3(signature = (config, output_dir = None))]
fn transfer(py: Python<'_>, config: PathBuf, output_dir: Option<PathBuf>) -> PyResult<(String, Vec<Option<String>>)> {
    let mut cfg = RunConfig::load(&config).map_err(value_err)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let manifest = py.detach(|| run_transfer(&cfg)).map_err(runtime_err)?;
    let path = cfg.output_dir.join(MANIFEST_FILE);
    Ok((path.display().to_string(), manifest.items.into_iter().map(|i| i.output).collect()))
}

/// Scores a manifest; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (manifest, references = None))]
fn evaluate<'py>(py: Python<'py>, manifest: PathBuf, references: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let report = py
        .detach(|| run_eval(&manifest, references.as_deref(), None))
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", report.accuracy)?;
    d.set_item("r_sbleu", report.r_sbleu)?;
    d.set_item("s_sbleu", report.s_sbleu)?;
    d.set_item("ppl", report.ppl)?;
    d.set_item("n_items", report.n_items)?;
    Ok(d)
}

#[pymodule(name = "stylecraft")]
fn stylecraft_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyEmbedder>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(read_conllu, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(log_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(split_chunks, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
