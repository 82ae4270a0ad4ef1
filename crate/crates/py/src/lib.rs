//! Python bindings for the `dga` crate.
//!
//! Structured values (configs, metrics) cross the boundary as plain Python
//! dicts through the `json` module; tensors as nested lists.

use std::path::PathBuf;

use dga::autodiff::{Graph, RngState, Tensor};
use dga::cli::{dispatch, parse_config, Command};
use dga::corpus::{SyntheticCorpusSpec, PAD};
use dga::datrain::{contrastive_loss as contrast, ContrastBatch};
use dga::evalharness::{classification_metrics as metrics, perplexity as ppl};
use dga::gradsuite::{run_grad_checks, GradCheckConfig};
use dga::importance::{estimate_importance, normalize_importance as normalize, ImportanceMatrix};
use dga::model::{load_checkpoint, save_checkpoint, EncoderModel, GateMode, ModelConfig, TokenBatch};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(dga_py, DgaError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    DgaError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match obj {
        None => Ok(T::default()),
        Some(o) => {
            let s: String = py.import("json")?.call_method1("dumps", (o,))?.extract()?;
            serde_json::from_str(&s).map_err(err)
        }
    }
}

fn batch_of(ids: &[Vec<usize>]) -> PyResult<TokenBatch> {
    TokenBatch::from_sequences(ids, PAD).map_err(err)
}

fn nested(t: &Tensor) -> Vec<Vec<f32>> {
    let d = t.last_dim();
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

/// Gated-attention transformer encoder.
#[pyclass(name = "Model", module = "dga_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config` is a dict of model keys, missing keys take defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = from_py(py, config)?;
        Ok(Self {
            inner: EncoderModel::init(cfg, &RngState::new(seed)).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .inner
            .param(name)
            .ok_or_else(|| DgaError::new_err(format!("unknown parameter `{name}`")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Final hidden states `[batch][seq][d_model]` without dropout; `gates`
    /// is an optional flat list of `L*H` head gates.
    #[pyo3(signature = (ids, gates=None))]
    fn hidden(&self, ids: Vec<Vec<usize>>, gates: Option<Vec<f32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let batch = batch_of(&ids)?;
        let mut g = Graph::new();
        let p = self.inner.bind(&mut g, false);
        let mode = gates.map_or(GateMode::Off, GateMode::Fixed);
        let trace = self.inner.encoder_forward(&mut g, &p, &batch, &mode, None).map_err(err)?;
        let rows = nested(g.value(trace.hidden));
        Ok(rows.chunks(batch.seq_len).map(<[Vec<f32>]>::to_vec).collect())
    }

    /// MLM logits `[batch][seq][vocab]` without dropout.
    fn mlm_logits(&self, ids: Vec<Vec<usize>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let batch = batch_of(&ids)?;
        let mut g = Graph::new();
        let p = self.inner.bind(&mut g, false);
        let trace = self.inner.encoder_forward(&mut g, &p, &batch, &GateMode::Off, None).map_err(err)?;
        let logits = self.inner.mlm_logits(&mut g, &p, trace.hidden).map_err(err)?;
        let rows = nested(g.value(logits));
        Ok(rows.chunks(batch.seq_len).map(<[Vec<f32>]>::to_vec).collect())
    }

    /// Mean-pooled sequence representations `[batch][d_model]`.
    fn pooled(&self, ids: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
        let batch = batch_of(&ids)?;
        let mut g = Graph::new();
        let p = self.inner.bind(&mut g, false);
        let trace = self.inner.encoder_forward(&mut g, &p, &batch, &GateMode::Off, None).map_err(err)?;
        let pooled = g.mean_pool(trace.hidden, &batch.padding_mask).map_err(err)?;
        Ok(nested(g.value(pooled)))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(L={}, H={}, d={}, V={})", c.num_layers, c.heads_per_layer, c.d_model, c.vocab_size)
    }
}

/// Head importance `[L][H]`, raw and (when normalized) in `[0, 1]`.
#[pyclass(name = "Importance", module = "dga_py", skip_from_py_object)]
#[derive(Clone)]
struct PyImportance {
    inner: ImportanceMatrix,
}

#[pymethods]
impl PyImportance {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ImportanceMatrix::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn raw(&self) -> Vec<Vec<f32>> {
        self.inner.raw.chunks(self.inner.heads_per_layer).map(<[f32]>::to_vec).collect()
    }

    #[getter]
    fn norm(&self) -> Option<Vec<Vec<f32>>> {
        self.inner
            .norm
            .as_ref()
            .map(|n| n.chunks(self.inner.heads_per_layer).map(<[f32]>::to_vec).collect())
    }

    #[getter]
    fn num_batches(&self) -> usize {
        self.inner.num_batches
    }
}

/// Proxy-KL head importance over token-id batches, normalized.
#[pyfunction]
#[pyo3(signature = (model, batches, seed=0))]
fn importance(model: &PyModel, batches: Vec<Vec<Vec<usize>>>, seed: u64) -> PyResult<PyImportance> {
    let subset = batches.iter().map(|b| batch_of(b)).collect::<PyResult<Vec<_>>>()?;
    let raw = estimate_importance(&model.inner, &subset, &RngState::new(seed)).map_err(err)?;
    Ok(PyImportance {
        inner: normalize(&raw).map_err(err)?,
    })
}

/// Global standardization followed by `|tanh|`, over `[L][H]` raw scores.
#[pyfunction]
fn normalize_importance(raw: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let h = raw.first().map_or(0, Vec::len);
    let flat: Vec<f32> = raw.concat();
    let m = ImportanceMatrix::from_raw(raw.len(), h, flat).map_err(err)?;
    let n = normalize(&m).map_err(err)?;
    Ok(n.norm().map_err(err)?.chunks(h).map(<[f32]>::to_vec).collect())
}

/// Contrastive loss of anchor rows against positives and optional general-knowledge negatives.
#[pyfunction]
#[pyo3(signature = (anchors, positives, negatives=None, tau=0.05))]
fn contrastive_loss(anchors: Vec<Vec<f32>>, positives: Vec<Vec<f32>>, negatives: Option<Vec<Vec<f32>>>, tau: f32) -> PyResult<f32> {
    let mut g = Graph::new();
    let mut leaf = |rows: &[Vec<f32>]| -> PyResult<_> { Ok(g.constant(Tensor::from_rows(rows).map_err(err)?)) };
    let a = leaf(&anchors)?;
    let p = leaf(&positives)?;
    let n = negatives.as_deref().map(&mut leaf).transpose()?;
    let cb = ContrastBatch {
        anchors: a,
        positives: p,
        negatives: n,
    };
    let loss = contrast(&mut g, &cb, tau).map_err(err)?;
    Ok(g.value(loss).item())
}

/// Masked-LM perplexity over token-id sequences.
#[pyfunction]
#[pyo3(signature = (model, sequences, seed=0, batch_size=64))]
fn perplexity(model: &PyModel, sequences: Vec<Vec<usize>>, seed: u64, batch_size: usize) -> PyResult<f64> {
    ppl(&model.inner, &sequences, seed, batch_size).map_err(err)
}

/// Accuracy, macro-F1 and micro-F1 as a dict.
#[pyfunction]
fn classification_metrics(py: Python<'_>, preds: Vec<usize>, golds: Vec<usize>, num_classes: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &metrics(&preds, &golds, num_classes).map_err(err)?)
}

/// The general and domain corpora as lists of whitespace-separated lines.
#[pyfunction]
#[pyo3(signature = (spec=None, seed=0))]
fn generate_corpus(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let spec: SyntheticCorpusSpec = from_py(py, spec)?;
    let c = dga::corpus::generate_synthetic(&spec, &RngState::new(seed)).map_err(err)?;
    Ok((c.general, c.domain))
}

/// Finite-difference gradient checks as `(name, rel_err, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (config=None, seed=0))]
fn grad_check(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg: ModelConfig = from_py(py, config)?;
    let gc = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let results = run_grad_checks(&cfg, &gc).map_err(err)?;
    Ok(results.into_iter().map(|r| (r.name, r.rel_err, r.pass)).collect())
}

/// Resolved run configuration as a dict.
#[pyfunction]
#[pyo3(signature = (path=None, overrides=Vec::new()))]
fn load_config(py: Python<'_>, path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Py<PyAny>> {
    to_py(py, &parse_config(path.as_deref(), &overrides).map_err(err)?)
}

/// Runs a pipeline subcommand and returns its console output.
#[pyfunction]
#[pyo3(signature = (command, config=None, overrides=Vec::new()))]
fn run(command: &str, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    let cmd = match command {
        "gen-corpus" => Command::GenCorpus,
        "pretrain" => Command::Pretrain,
        "importance" => Command::Importance,
        "da-train" => Command::DaTrain,
        "finetune" => Command::Finetune { checkpoint: None },
        "eval" => Command::Eval { checkpoint: None },
        "ablate" => Command::Ablate,
        "grad-check" => Command::GradCheck,
        "report" => Command::Report { dir: None },
        other => return Err(DgaError::new_err(format!("unknown command `{other}`"))),
    };
    let cfg = parse_config(config.as_deref(), &overrides).map_err(err)?;
    let mut out = Vec::new();
    dispatch(&cmd, &cfg, &mut out).map_err(err)?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

#[pymodule]
fn dga_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DgaError", m.py().get_type::<DgaError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyImportance>()?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_importance, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
