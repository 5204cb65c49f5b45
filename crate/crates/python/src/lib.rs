//! Python bindings: corpus generation, training, decoding and metrics.

use std::path::PathBuf;

use lasyn::corpus::{generate as gen_pairs, SynthGrammar};
use lasyn::decoder::BeamConfig;
use lasyn::experiment::{self, ExperimentConfig, GenDataOptions};
use lasyn::LasynError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: LasynError) -> PyErr {
    match e {
        LasynError::Config(_) => PyValueError::new_err(e.to_string()),
        LasynError::Data(_) | LasynError::Io(_) | LasynError::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// A trained checkpoint together with its vocabularies and tag names.
#[pyclass(module = "lasyn_py")]
struct Translator {
    inner: experiment::Translator,
}

#[pymethods]
impl Translator {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Translator {
            inner: experiment::Translator::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn tag_names(&self) -> Vec<String> {
        self.inner.tags.names().to_vec()
    }

    #[getter]
    fn tag_vocab_size(&self) -> usize {
        self.inner.model.config().tag_vocab_size
    }

    /// Translates whitespace-tokenized sentences. With `tags`, each sentence
    /// is decoded under that tag template. Returns dicts with `tokens`,
    /// `tags` and `score`.
    #[pyo3(signature = (sentences, beam=5, max_len=64, length_penalty=1.0, tags=None, threads=1))]
    fn translate<'py>(
        &self,
        py: Python<'py>,
        sentences: Vec<String>,
        beam: usize,
        max_len: usize,
        length_penalty: f64,
        tags: Option<Vec<String>>,
        threads: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let sources: Vec<Vec<String>> = sentences.iter().map(|s| words(s)).collect();
        let templates: Option<Vec<Vec<String>>> = tags.map(|t| t.iter().map(|s| words(s)).collect());
        let cfg = BeamConfig {
            beam,
            max_len,
            length_penalty,
        };
        let inner = &self.inner;
        let recs = py
            .detach(|| inner.translate(&sources, &cfg, templates.as_deref(), threads.max(1)))
            .map_err(py_err)?;
        recs.into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("tokens", r.tokens)?;
                d.set_item("tags", r.tags)?;
                d.set_item("score", r.score)?;
                Ok(d)
            })
            .collect()
    }
}

/// Pairs from the built-in grammar as `(source, target, tags)` token lists.
#[pyfunction]
#[pyo3(signature = (n, seed=7))]
fn generate(n: usize, seed: u64) -> PyResult<Vec<(Vec<String>, Vec<String>, Vec<String>)>> {
    let g = SynthGrammar::default();
    let names = g.tag_names();
    Ok(gen_pairs(&g, n, seed)
        .map_err(py_err)?
        .into_iter()
        .map(|e| {
            let tags = e.tags.iter().map(|&t| names[t].clone()).collect();
            (e.src, e.tgt, tags)
        })
        .collect())
}

/// Writes a corpus directory; returns the split sizes and tag names.
#[pyfunction]
#[pyo3(signature = (out, n=5000, seed=None, bpe_merges=None, merge_tags=None))]
fn gen_data<'py>(
    py: Python<'py>,
    out: PathBuf,
    n: usize,
    seed: Option<u64>,
    bpe_merges: Option<usize>,
    merge_tags: Option<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = experiment::gen_data(&GenDataOptions {
        grammar: None,
        n,
        seed,
        out,
        bpe_merges,
        merge_tags,
    })
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("train", s.train)?;
    d.set_item("valid", s.valid)?;
    d.set_item("test", s.test)?;
    d.set_item("tags", s.tags)?;
    Ok(d)
}

/// Trains on a corpus directory into `out` and returns per-epoch metrics.
/// `config` is an optional TOML file; keyword arguments override it.
#[pyfunction]
#[pyo3(signature = (data, out, config=None, k=None, lam=None, epochs=None, seed=None, vz=None, threads=1))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    k: Option<usize>,
    lam: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    vz: Option<usize>,
    threads: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    cfg.data = Some(data);
    cfg.out = Some(out);
    cfg.threads = Some(threads.max(1));
    if let Some(v) = k {
        cfg.train.k = v;
    }
    if let Some(v) = lam {
        cfg.train.lambda = v;
    }
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if vz.is_some() {
        cfg.model.tag_vocab_size = vz;
    }
    let (_, trainer) = py.detach(|| experiment::train(&cfg, false)).map_err(py_err)?;
    trainer
        .epoch_log()
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("steps", e.steps)?;
            d.set_item("train_nll", e.train_nll)?;
            d.set_item("valid_nll", e.valid_nll)?;
            d.set_item("valid_bleu", e.valid_bleu)?;
            Ok(d)
        })
        .collect()
}

/// Corpus BLEU-4 (0-100) of tokenized hypotheses against references.
#[pyfunction]
#[pyo3(signature = (hypotheses, references, smooth=false))]
fn bleu(hypotheses: Vec<Vec<String>>, references: Vec<Vec<String>>, smooth: bool) -> PyResult<f64> {
    lasyn::metrics::bleu(&hypotheses, &references, smooth).map_err(py_err)
}

/// Distinct unigram types over total tokens.
#[pyfunction]
fn distinct1(outputs: Vec<Vec<String>>) -> PyResult<f64> {
    lasyn::metrics::distinct1(&outputs).map_err(py_err)
}

#[pyfunction]
fn levenshtein(a: Vec<String>, b: Vec<String>) -> usize {
    lasyn::metrics::levenshtein(&a, &b)
}

/// Largest relative error of the finite-difference check on the default
/// model shape.
#[pyfunction]
#[pyo3(signature = (samples=400, seed=1))]
fn grad_check(py: Python<'_>, samples: usize, seed: u64) -> PyResult<f64> {
    let cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    let report = py.detach(|| experiment::grad_check(&cfg, samples)).map_err(py_err)?;
    Ok(report.max_rel_error)
}

#[pymodule]
fn lasyn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Translator>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(distinct1, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
