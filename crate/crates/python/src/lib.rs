//! Python bindings: load the artifacts written by the `respsel` CLI and query
//! them from Python, or drive the CLI itself.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use respsel::corpus::{tokenize, Field};
use respsel::dense;
use respsel::models::{self, Role};
use respsel::sparse::{self, Bm25Params};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn field(name: &str) -> PyResult<Field> {
    name.parse().map_err(err)
}

/// Token vocabulary (`vocab.tsv`).
#[pyclass(frozen)]
struct Vocabulary(respsel::corpus::Vocabulary);

#[pymethods]
impl Vocabulary {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        respsel::corpus::Vocabulary::load(&path)
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Token ids of a dialogue context given as a list of utterances.
    fn encode_context(&self, utterances: Vec<String>) -> Vec<u32> {
        self.0.encode_context(&utterances)
    }

    fn encode_text(&self, text: &str) -> Vec<u32> {
        self.0.encode_text(text)
    }
}

/// Dual-encoder student checkpoint.
#[pyclass(frozen)]
struct Student(models::Student);

#[pymethods]
impl Student {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        models::Student::load(&path).map(Self).map_err(err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.0.mode().to_string()
    }

    #[getter]
    fn out_dim(&self) -> usize {
        self.0.config().out_dim
    }

    fn encode_query(&self, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        self.0.encode_query(&tokens).map_err(err)
    }

    /// Encodes a database field (`context`, `session` or `response`).
    fn encode_field(&self, field_name: &str, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        self.0
            .encode_field(field(field_name)?, &tokens)
            .map_err(err)
    }

    fn encode_context(&self, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        self.0.encode(Role::Context, &tokens).map_err(err)
    }
}

/// Cross-attention teacher checkpoint.
#[pyclass(frozen)]
struct Teacher(models::CrossScorer);

#[pymethods]
impl Teacher {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        models::CrossScorer::load(&path).map(Self).map_err(err)
    }

    #[getter]
    fn field(&self) -> String {
        self.0.field().to_string()
    }

    /// Relevance logit of a candidate for a query.
    fn score(&self, query: Vec<u32>, candidate: Vec<u32>) -> PyResult<f64> {
        self.0.score(&query, &candidate).map_err(err)
    }
}

/// BM25 inverted index (`bm25_<field>.idx`) or one built in memory.
#[pyclass(frozen)]
struct Bm25Index {
    index: sparse::InvertedIndex,
    params: Bm25Params,
}

#[pymethods]
impl Bm25Index {
    #[staticmethod]
    #[pyo3(signature = (path, k1 = 1.2, b = 0.75))]
    fn load(path: PathBuf, k1: f64, b: f64) -> PyResult<Self> {
        let index = sparse::InvertedIndex::load(&path).map_err(err)?;
        Self::with_params(index, k1, b)
    }

    /// Indexes `(id, text)` documents.
    #[staticmethod]
    #[pyo3(signature = (docs, field_name = "context", k1 = 1.2, b = 0.75))]
    fn build(docs: Vec<(u64, String)>, field_name: &str, k1: f64, b: f64) -> PyResult<Self> {
        let index = sparse::InvertedIndex::build(
            docs.iter().map(|(id, text)| (*id, tokenize(text))),
            field(field_name)?,
        )
        .map_err(err)?;
        Self::with_params(index, k1, b)
    }

    fn __len__(&self) -> usize {
        self.index.doc_count()
    }

    fn search(&self, query: &str, k: usize) -> Vec<(u64, f64)> {
        self.index.search(&tokenize(query), k, &self.params)
    }
}

impl Bm25Index {
    fn with_params(index: sparse::InvertedIndex, k1: f64, b: f64) -> PyResult<Self> {
        let params = Bm25Params { k1, b };
        params.validate().map_err(err)?;
        Ok(Bm25Index { index, params })
    }
}

/// Precomputed embeddings of one database field (`.emb`).
#[pyclass(frozen)]
struct EmbeddingShard(dense::EmbeddingShard);

#[pymethods]
impl EmbeddingShard {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dense::EmbeddingShard::load(&path).map(Self).map_err(err)
    }

    #[new]
    fn new(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> PyResult<Self> {
        dense::EmbeddingShard::new(dim, ids, data)
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn ids(&self) -> Vec<u64> {
        self.0.ids().to_vec()
    }

    fn search(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<(u64, f64)>> {
        self.0.exact_topk(&query, k).map_err(err)
    }
}

/// Inverted-file index over an embedding shard (`.ivf`).
#[pyclass(frozen)]
struct IvfIndex(dense::IvfIndex);

#[pymethods]
impl IvfIndex {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dense::IvfIndex::load(&path).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (shard, nlist = None, seed = 0))]
    fn build(shard: &EmbeddingShard, nlist: Option<usize>, seed: u64) -> PyResult<Self> {
        let nlist = nlist.unwrap_or_else(|| dense::default_nlist(shard.0.len()));
        dense::IvfIndex::build(&shard.0, nlist, seed)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn nlist(&self) -> usize {
        self.0.nlist()
    }

    /// Top `k` hits and the number of vectors scanned.
    #[pyo3(signature = (query, k, nprobe = None))]
    fn search(
        &self,
        query: Vec<f64>,
        k: usize,
        nprobe: Option<usize>,
    ) -> PyResult<(Vec<(u64, f64)>, usize)> {
        let hits = self
            .0
            .search(&query, k, nprobe.unwrap_or_else(|| self.0.default_nprobe()))
            .map_err(err)?;
        Ok((hits.hits, hits.scanned))
    }
}

/// Runs the command-line tool with the given arguments (without the program
/// name), e.g. `run_cli(["--workdir", "w", "build-dataset"])`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<()> {
    use clap::Parser;
    let cli = respsel::cli::Cli::try_parse_from(std::iter::once("respsel".to_string()).chain(args))
        .map_err(err)?;
    respsel::cli::run(cli).map_err(|e| PyRuntimeError::new_err(format!("{e:#}")))
}

#[pyfunction]
fn similarity(q: Vec<f64>, k: Vec<f64>) -> PyResult<f64> {
    models::similarity(&q, &k).map_err(err)
}

#[pyfunction]
fn recall(truth: Vec<(u64, f64)>, approx: Vec<(u64, f64)>) -> f64 {
    dense::recall(&truth, &approx)
}

#[pymodule]
fn respsel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Student>()?;
    m.add_class::<Teacher>()?;
    m.add_class::<Bm25Index>()?;
    m.add_class::<EmbeddingShard>()?;
    m.add_class::<IvfIndex>()?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    Ok(())
}
