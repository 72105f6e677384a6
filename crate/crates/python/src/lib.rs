use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gradprune::cost::{self, CostConfig, CostQuery};
use gradprune::harness::experiment::{run_experiment, train_from_config};
use gradprune::harness::{generate_task, ExperimentConfig, TaskSpec};
use gradprune::nms::cosine_similarity as cosine;
use gradprune::{
    checkpoint, nms, prefill_pruned, Matrix, ModelConfig, PipelineOptions, PruneSchedule, Selector, TokenSequence,
};

fn err(e: gradprune::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

/// Parses a JSON string into Python objects through the stdlib.
fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pyclass(name = "Model", module = "gradprune_py")]
struct PyModel {
    inner: gradprune::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (layers=4, hidden=64, heads=4, ffn=128, vocab=8, max_seq=128, seed=None))]
    fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        vocab: usize,
        max_seq: usize,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let defaults = ModelConfig::default();
        let cfg = ModelConfig {
            layers,
            hidden,
            heads,
            ffn,
            vocab,
            max_seq,
            seed: seed.unwrap_or(defaults.seed),
            ..defaults
        };
        Ok(PyModel {
            inner: gradprune::Model::init(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(path, &self.inner).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Next-token logits after a full prefill of `embeddings`, whose first
    /// `visual_len` rows are visual.
    fn prefill(&self, embeddings: Vec<Vec<f64>>, visual_len: usize) -> PyResult<Vec<f64>> {
        let seq = TokenSequence::with_layout(matrix(embeddings)?, visual_len).map_err(err)?;
        Ok(self.inner.prefill(&seq).map_err(err)?.logits)
    }

    /// Staged pruning prefill; returns the pipeline trace as a dict.
    #[pyo3(signature = (embeddings, visual_len, layers, keeps, kpos=4, tau=0.8, selector="pio-nms", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn prune<'py>(
        &self,
        py: Python<'py>,
        embeddings: Vec<Vec<f64>>,
        visual_len: usize,
        layers: Vec<usize>,
        keeps: Vec<usize>,
        kpos: usize,
        tau: f64,
        selector: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let seq = TokenSequence::with_layout(matrix(embeddings)?, visual_len).map_err(err)?;
        let schedule = PruneSchedule::new(&layers, &keeps, kpos, tau).map_err(err)?;
        let opts = PipelineOptions {
            selector: Selector::parse(selector).map_err(err)?,
            seed,
            with_reference: true,
            ..PipelineOptions::default()
        };
        let out = prefill_pruned(&self.inner, &seq, &schedule, &opts).map_err(err)?;
        json_to_py(py, &out.trace.to_record())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(layers={}, hidden={}, heads={}, ffn={}, vocab={})", c.layers, c.hidden, c.heads, c.ffn, c.vocab)
    }
}

/// Greedy feature-space NMS; returns the kept candidate indices in
/// selection order.
#[pyfunction]
#[pyo3(signature = (scores, features, budget, tau=0.8))]
fn nms_select(scores: Vec<f64>, features: Vec<Vec<f64>>, budget: usize, tau: f64) -> PyResult<Vec<usize>> {
    let features = matrix(features)?;
    let out = nms::nms_select(&nms::SelectionInput {
        scores: &scores,
        features: &features,
        budget,
        tau,
        interval_offset: 0,
    })
    .map_err(err)?;
    Ok(out.kept)
}

#[pyfunction]
fn top_k_select(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    nms::top_k_select(&scores, k).map_err(err)
}

#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    if u.len() != v.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(cosine(&u, &v))
}

/// Layer spans `[(slot, first_layer, span), ...]` of a schedule.
#[pyfunction]
fn segment_lengths(layers: u64, schedule: Vec<u64>) -> PyResult<Vec<(usize, u64, u64)>> {
    let spans = cost::segment_lengths(layers, &schedule).map_err(err)?;
    Ok(spans.iter().map(|s| (s.slot, s.first_layer, s.span)).collect())
}

#[pyfunction]
#[pyo3(signature = (hidden, ffn, layers, schedule, tokens, gamma=3.0, bytes_per_element=2, kv_extra_tokens=0))]
#[allow(clippy::too_many_arguments)]
fn cost_report<'py>(
    py: Python<'py>,
    hidden: u64,
    ffn: u64,
    layers: u64,
    schedule: Vec<u64>,
    tokens: Vec<u64>,
    gamma: f64,
    bytes_per_element: u64,
    kv_extra_tokens: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = CostConfig {
        gamma,
        bytes_per_element,
        ..CostConfig::new(hidden, ffn, layers)
    };
    let report = cost::cost_report(
        &cfg,
        &CostQuery {
            schedule: &schedule,
            tokens: &tokens,
            kv_extra_tokens,
            nms_scan_macs: None,
        },
    )
    .map_err(err)?;
    to_py(py, &report)
}

/// Synthetic samples as dicts with `embeddings`, `visual_len`, `label` and
/// `planted`.
#[pyfunction]
#[pyo3(signature = (samples=8, seed=1, visual_count=64, planted_count=4, class_count=5, hidden=64))]
fn generate_samples<'py>(
    py: Python<'py>,
    samples: usize,
    seed: u64,
    visual_count: usize,
    planted_count: usize,
    class_count: usize,
    hidden: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let spec = TaskSpec {
        samples,
        seed,
        visual_count,
        planted_count,
        class_count,
        hidden,
        ..TaskSpec::default()
    };
    let data = generate_task(&spec).map_err(err)?;
    data.samples
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("embeddings", s.seq.embeddings().to_rows())?;
            d.set_item("visual_len", s.seq.visual_len())?;
            d.set_item("label", s.label)?;
            d.set_item("planted", s.planted.clone())?;
            Ok(d)
        })
        .collect()
}

fn parse_config(toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match toml {
        Some(t) => ExperimentConfig::from_toml(t).map_err(err),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Trains on the configured task; returns `(model, heldout_accuracy)`.
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn train(py: Python<'_>, config_toml: Option<&str>) -> PyResult<(PyModel, f64)> {
    let cfg = parse_config(config_toml)?;
    let outcome = py.detach(|| train_from_config(&cfg)).map_err(err)?;
    Ok((PyModel { inner: outcome.model }, outcome.heldout_accuracy))
}

/// Runs the configured selectors on the evaluation split; one dict per row.
#[pyfunction]
#[pyo3(signature = (model, config_toml=None))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, config_toml: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config_toml)?;
    let data = generate_task(&cfg.task_spec(gradprune::harness::Split::Eval)).map_err(err)?;
    let rows = py.detach(|| run_experiment(&cfg, &model.inner, &data)).map_err(err)?;
    to_py(py, &rows)
}

#[pymodule]
fn gradprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(nms_select, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_select, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(segment_lengths, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(generate_samples, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
