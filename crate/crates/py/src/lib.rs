//! Python bindings for `ockl`.
//!
//! Configs, streams and summaries cross the boundary as JSON strings, the
//! same documents the CLI reads and writes.

use ockl::config::RunConfig;
use ockl::coreset::{self, LossOrder, SelectionResult};
use ockl::datagen::{compute_stream_stats, StreamConfig};
use ockl::metrics;
use ockl::report::{metrics_csv, to_pretty_json, Summary};
use ockl::scheduler::{self, execute};
use ockl::EmbeddingVector;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Runs one experiment and returns `(summary_json, metrics_csv)`.
pub fn run_config_json(config: &str) -> Result<(String, String), String> {
    let cfg = RunConfig::from_json(config).map_err(|e| e.to_string())?;
    let result = execute(&cfg).map_err(|e| e.to_string())?;
    Ok((to_pretty_json(&Summary::from_result(&result)), metrics_csv(&result.records)))
}

/// Generates a stream and returns it as JSON with its statistics.
pub fn generate_stream_json(config: &str) -> Result<String, String> {
    let cfg: StreamConfig = if config.trim().is_empty() {
        StreamConfig::default()
    } else {
        serde_json::from_str(config).map_err(|e| e.to_string())?
    };
    let (_, stream) = cfg.generate().map_err(|e| e.to_string())?;
    let stats = compute_stream_stats(&stream);
    let doc = serde_json::json!({ "config": cfg, "stream": stream, "stats": stats });
    Ok(doc.to_string())
}

pub fn parse_order(order: &str) -> Result<LossOrder, String> {
    match order {
        "ascending" => Ok(LossOrder::Ascending),
        "descending" => Ok(LossOrder::Descending),
        other => Err(format!("order must be `ascending` or `descending`, got `{other}`")),
    }
}

fn embeddings(rows: Vec<Vec<f64>>) -> Vec<EmbeddingVector> {
    rows.into_iter().map(EmbeddingVector::new).collect()
}

fn indices(r: SelectionResult) -> Vec<usize> {
    r.indices
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    ockl::tokenize(text).into_iter().map(str::to_string).collect()
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    ockl::normalize_answer(text).to_string()
}

#[pyfunction]
#[pyo3(signature = (text, dim = ockl::text::DEFAULT_EMBED_DIM))]
fn hash_embed(text: &str, dim: usize) -> Vec<f64> {
    ockl::hash_embed(text, dim).into_values()
}

#[pyfunction]
fn exact_match(predictions: Vec<String>, golds: Vec<String>) -> PyResult<f64> {
    metrics::exact_match(&predictions, &golds).map_err(value_err)
}

#[pyfunction]
fn kar(fwt: f64, bwt: f64, total_tokens: f64, training_time_s: f64) -> PyResult<f64> {
    metrics::kar(fwt, bwt, total_tokens, training_time_s).map_err(value_err)
}

#[pyfunction]
fn knowledge_gap(set_a: Vec<Vec<f64>>, set_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::knowledge_gap(&embeddings(set_a), &embeddings(set_b)).map_err(value_err)
}

#[pyfunction]
fn select_random(n: usize, ratio: f64, seed: u64) -> PyResult<Vec<usize>> {
    coreset::select_random(n, ratio, seed).map(indices).map_err(value_err)
}

#[pyfunction]
fn select_kcenter(points: Vec<Vec<f64>>, ratio: f64) -> PyResult<Vec<usize>> {
    coreset::select_kcenter(&embeddings(points), ratio).map(indices).map_err(value_err)
}

/// Centers in the order the greedy traversal picks them.
#[pyfunction]
fn kcenter_order(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    coreset::kcenter_order(&points, k).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (losses, ratio, order = "ascending"))]
fn select_model_based(losses: Vec<f64>, ratio: f64, order: &str) -> PyResult<Vec<usize>> {
    let order = parse_order(order).map_err(value_err)?;
    coreset::select_model_based(&losses, ratio, order).map(indices).map_err(value_err)
}

#[pyfunction]
fn budget_prefix(costs: Vec<f64>, budget: f64) -> PyResult<usize> {
    scheduler::budget_prefix(&costs, budget).map_err(value_err)
}

/// Stream config JSON (empty for the default) to a JSON document with
/// `config`, `stream` and `stats`.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn generate_stream(config: &str) -> PyResult<String> {
    generate_stream_json(config).map_err(value_err)
}

/// Run config JSON to `(summary_json, metrics_csv)`.
#[pyfunction]
fn run(py: Python<'_>, config: &str) -> PyResult<(String, String)> {
    let config = config.to_string();
    py.detach(move || run_config_json(&config)).map_err(value_err)
}

/// Accuracy matrix indexed by (model step, task), both 1-based.
#[pyclass(name = "AccuracyMatrix")]
#[derive(Default)]
struct PyAccuracyMatrix {
    inner: ockl::AccuracyMatrix,
}

#[pymethods]
impl PyAccuracyMatrix {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn set(&mut self, model_step: usize, task: usize, value: f64) -> PyResult<()> {
        self.inner.set(model_step, task, value).map_err(value_err)
    }

    fn get(&self, model_step: usize, task: usize) -> Option<f64> {
        self.inner.get(model_step, task)
    }

    fn tasks(&self) -> usize {
        self.inner.tasks()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Backward transfer over tasks `1..=tasks` (all tasks when omitted).
    #[pyo3(signature = (tasks = None))]
    fn bwt(&self, tasks: Option<usize>) -> PyResult<f64> {
        metrics::bwt(&self.inner, tasks.unwrap_or(self.inner.tasks())).map_err(value_err)
    }

    #[pyo3(signature = (tasks = None))]
    fn fwt(&self, tasks: Option<usize>) -> PyResult<f64> {
        metrics::fwt(&self.inner, tasks.unwrap_or(self.inner.tasks())).map_err(value_err)
    }
}

#[pymodule]
fn pyockl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", ockl::VERSION)?;
    m.add_class::<PyAccuracyMatrix>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(hash_embed, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(kar, m)?)?;
    m.add_function(wrap_pyfunction!(knowledge_gap, m)?)?;
    m.add_function(wrap_pyfunction!(select_random, m)?)?;
    m.add_function(wrap_pyfunction!(select_kcenter, m)?)?;
    m.add_function(wrap_pyfunction!(kcenter_order, m)?)?;
    m.add_function(wrap_pyfunction!(select_model_based, m)?)?;
    m.add_function(wrap_pyfunction!(budget_prefix, m)?)?;
    m.add_function(wrap_pyfunction!(generate_stream, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_returns_summary_and_metrics() {
        let cfg = r#"{"stream":{"generate":{"n_entities":6,"n_relations":3,"n_steps":3,"horizon":60}},"learner":{"kind":"fact_memory"}}"#;
        let (summary, csv) = run_config_json(cfg).unwrap();
        let s: serde_json::Value = serde_json::from_str(&summary).unwrap();
        assert_eq!(s["steps"], 3);
        assert_eq!(s["em"], 1.0);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(run_config_json(cfg).unwrap().1, csv);
    }

    #[test]
    fn bad_config_is_an_error() {
        let err = run_config_json(r#"{"coreset":{"ratio":0}}"#).unwrap_err();
        assert!(err.contains("coreset.ratio"), "{err}");
    }

    #[test]
    fn stream_document_has_stats() {
        let doc: serde_json::Value = serde_json::from_str(&generate_stream_json("").unwrap()).unwrap();
        assert_eq!(doc["stream"]["steps"].as_array().unwrap().len(), 20);
        assert!(doc["stats"]["n_items"].as_u64().unwrap() > 0);
    }

    #[test]
    fn loss_order_names() {
        assert_eq!(parse_order("descending"), Ok(LossOrder::Descending));
        assert!(parse_order("up").is_err());
    }
}
