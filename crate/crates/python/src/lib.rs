//! Python bindings: synthetic series, retrieval, rank statistics and a
//! one-call train/evaluate run. Arrays cross the boundary as nested lists
//! (`channels × steps`).

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use raft_core::eval::{self, Dataset, RunConfig, TestWindows, Variant};
use raft_core::retrieval::{build_index, retrieve, ExclusionRule, MetricKind, RetrievalParams};
use raft_core::series::{Patch, SplitSpec};
use raft_core::synthetic::{assemble, PatternKind, Region, SyntheticSpec};
use raft_core::{RaftError, TimeSeries};

fn err(e: RaftError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let c = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != t) {
        return Err(PyValueError::new_err("all channels must have the same length"));
    }
    Array2::from_shape_vec((c, t), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn series(rows: Vec<Vec<f64>>) -> PyResult<TimeSeries> {
    let values = matrix(rows)?;
    let names = (0..values.nrows()).map(|i| format!("c{i}")).collect();
    TimeSeries::new(values, names).map_err(err)
}

fn parse<T: std::str::FromStr<Err = RaftError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Generate a synthetic series with injected short-term patterns.
#[pyfunction]
#[pyo3(signature = (kind = "ar", occurrences = 1, seed = 0, total_length = 18000, n_patterns = 3, pattern_length = 200))]
fn synthesize<'py>(
    py: Python<'py>,
    kind: &str,
    occurrences: usize,
    seed: u64,
    total_length: usize,
    n_patterns: usize,
    pattern_length: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SyntheticSpec {
        pattern_kind: parse::<PatternKind>(kind)?,
        occurrences_per_pattern: occurrences,
        seed,
        total_length,
        n_distinct_patterns: n_patterns,
        pattern_length,
        ..SyntheticSpec::default()
    };
    let s = assemble(&spec).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("series", s.series.channel(0).to_vec())?;
    out.set_item("background", s.background.values.clone())?;
    let notes: Vec<(usize, usize, usize, &str)> = s
        .annotations
        .iter()
        .map(|a| (a.pattern_id, a.start, a.length, if a.region == Region::Train { "train" } else { "test" }))
        .collect();
    out.set_item("annotations", notes)?;
    out.set_item("train_end", s.split.train_end)?;
    out.set_item("val_end", s.split.val_end)?;
    Ok(out)
}

/// Retrieve the best-matching windows of `train` for `query` (inference
/// rule: every candidate is admissible). Returns one dict per period.
#[pyfunction]
#[pyo3(signature = (train, query, horizon, m = 20, tau = 0.1, metric = "pearson", periods = vec![1], stride = 1))]
#[allow(clippy::too_many_arguments)]
fn retrieve_windows<'py>(
    py: Python<'py>,
    train: Vec<Vec<f64>>,
    query: Vec<Vec<f64>>,
    horizon: usize,
    m: usize,
    tau: f64,
    metric: &str,
    periods: Vec<usize>,
    stride: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let train = series(train)?;
    let query = matrix(query)?;
    let params = RetrievalParams { m, tau, metric: parse::<MetricKind>(metric)?, ..RetrievalParams::default() };
    let index = build_index(&train, query.ncols(), horizon, stride, &periods).map_err(err)?;
    let result = retrieve(&index, &Patch::new(query, 0, 1), &params, ExclusionRule::inference()).map_err(err)?;
    result
        .periods
        .iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("period", p.period)?;
            d.set_item("starts", p.starts.clone())?;
            d.set_item("scores", p.scores.clone())?;
            d.set_item("weights", p.weights.clone())?;
            let agg: Vec<Vec<f64>> = p.aggregate.outer_iter().map(|r| r.to_vec()).collect();
            d.set_item("aggregate", agg)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::pearson(&a, &b).map_err(err)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&a, &b).map_err(err)
}

/// Train one model on `series` (channels × steps) and score it on the test split.
#[pyfunction]
#[pyo3(signature = (series_rows, train_end, val_end, lookback = 96, horizon = 96, seed = 0, variant = "full", m = 20, tau = 0.1, learning_rate = 1e-3, max_epochs = 10, periods = vec![1, 2, 4]))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    series_rows: Vec<Vec<f64>>,
    train_end: usize,
    val_end: usize,
    lookback: usize,
    horizon: usize,
    seed: u64,
    variant: &str,
    m: usize,
    tau: f64,
    learning_rate: f64,
    max_epochs: usize,
    periods: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let raw = series(series_rows)?;
    let ds = Dataset::new("python", &raw, SplitSpec::new(train_end, val_end)).map_err(err)?;
    let mut cfg = RunConfig { lookback, horizon, periods, variant: parse::<Variant>(variant)?, ..RunConfig::default() };
    cfg.retrieval.m = m;
    cfg.retrieval.tau = tau;
    cfg.train.learning_rate = learning_rate;
    cfg.train.max_epochs = max_epochs;
    let out = py
        .detach(|| eval::run_single(&ds, &cfg, seed, &TestWindows::All))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("val_mse", out.val_mse)?;
    d.set_item("test_mse", out.test_mse)?;
    d.set_item("test_mae", out.test_mae)?;
    d.set_item("best_epoch", out.history.best_epoch)?;
    d.set_item("epochs", out.history.epochs.len())?;
    Ok(d)
}

#[pymodule]
fn raft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve_windows, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
