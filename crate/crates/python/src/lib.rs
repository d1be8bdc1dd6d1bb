//! Python bindings: graphs, synthetic data, training, evaluation and
//! forecasting from checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};

use kgeformer::checkpoint;
use kgeformer::commands::{self, SynthOptions};
use kgeformer::config::RunConfig;
use kgeformer::data::{parse_timestamp, StandardScaler};
use kgeformer::graph::{parse_graph_file, KnowledgeGraphSpec};
use kgeformer::model::Transformer;
use kgeformer::synth::Generator;
use kgeformer::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(to_py(py, x)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize_py<S: serde::Serialize>(py: Python<'_>, value: &S) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// A parsed knowledge-graph file.
#[pyclass(name = "Graph")]
#[derive(Clone)]
struct PyGraph {
    spec: KnowledgeGraphSpec,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            spec: parse_graph_file(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| py_err(e.into()))?;
        Self::parse(&text)
    }

    #[getter]
    fn nodes(&self) -> Vec<String> {
        self.spec.nodes.clone()
    }

    #[getter]
    fn edges(&self) -> Vec<(String, String)> {
        self.spec.edges.clone()
    }

    #[getter]
    fn directed(&self) -> bool {
        self.spec.directed
    }

    /// Rows of the binary adjacency matrix in node order.
    fn adjacency(&self) -> PyResult<Vec<Vec<u8>>> {
        let adj = self.spec.to_adjacency().map_err(py_err)?;
        Ok(adj.values().chunks(adj.size().max(1)).map(<[u8]>::to_vec).collect())
    }

    fn serialize(&self) -> String {
        self.spec.serialize()
    }

    /// Checks the graph against dataset columns; returns the node index of
    /// each column.
    fn validate(&self, columns: Vec<String>) -> PyResult<Vec<usize>> {
        Ok(self.spec.validate_against_dataset(&columns).map_err(py_err)?.node_of_channel)
    }

    fn __repr__(&self) -> String {
        format!("Graph(nodes={}, edges={})", self.spec.nodes.len(), self.spec.edges.len())
    }
}

/// Run configuration; keys match the command-line flags and config files.
#[pyclass(name = "RunConfig")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Keyword arguments are applied with `set`.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = Self {
            inner: RunConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v)?;
            }
        }
        Ok(cfg)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        inner.apply_file(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = if let Ok(b) = value.downcast::<PyBool>() {
            b.is_true().to_string()
        } else {
            value.str()?.to_string()
        };
        self.inner.set(key, &text).map_err(py_err)
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", serde_json::to_string(&self.inner.canonical()).unwrap_or_default())
    }
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(name = "Model")]
struct PyModel {
    model: Transformer<f32>,
    scaler: Option<StandardScaler>,
    columns: Vec<String>,
    config_hash: String,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (path, force=false))]
    fn load(path: PathBuf, force: bool) -> PyResult<Self> {
        let ck = checkpoint::load(&path, None, force).map_err(py_err)?;
        Ok(Self {
            model: ck.model,
            scaler: ck.manifest.scaler,
            columns: ck.manifest.column_names,
            config_hash: ck.manifest.config_hash,
        })
    }

    #[getter]
    fn lookback(&self) -> usize {
        self.model.config.lookback
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.model.config.horizon
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.config_hash.clone()
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn kge_param_count(&self) -> usize {
        self.model.kge_param_count()
    }

    /// Forecasts `horizon` rows after `history` (`lookback` rows of raw
    /// values) with matching `YYYY-MM-DD HH:MM:SS` timestamps.
    fn forecast(&self, history: Vec<Vec<f64>>, timestamps: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.model.config.channels;
        if history.iter().any(|r| r.len() != m) {
            return Err(PyValueError::new_err(format!("every history row needs {m} values")));
        }
        let ts = timestamps
            .iter()
            .map(|s| parse_timestamp(s).ok_or_else(|| PyValueError::new_err(format!("bad timestamp `{s}`"))))
            .collect::<PyResult<Vec<_>>>()?;
        let flat: Vec<f64> = history.concat();
        let out = commands::forecast_raw(&self.model, self.scaler.as_ref(), &flat, &ts).map_err(py_err)?;
        Ok(out.chunks(m).map(<[f64]>::to_vec).collect())
    }
}

/// Writes `data.csv` and `graph.txt` under `out`; returns both paths.
#[pyfunction]
#[pyo3(signature = (out, generator="var1", channels=7, length=8000, edges=8, symmetric=false,
    noise_std=1.0, self_weight=0.5, edge_weight=0.3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    out: PathBuf,
    generator: &str,
    channels: usize,
    length: usize,
    edges: usize,
    symmetric: bool,
    noise_std: f64,
    self_weight: f64,
    edge_weight: f64,
    seed: u64,
) -> PyResult<(PathBuf, PathBuf)> {
    let generator = match generator {
        "var1" => Generator::Var1,
        "coupled-sines" | "coupled_sines" => Generator::CoupledSines,
        other => return Err(PyValueError::new_err(format!("unknown generator `{other}`"))),
    };
    let opts = SynthOptions {
        generator,
        channels,
        length,
        edges,
        symmetric,
        noise_std,
        self_weight,
        edge_weight,
        seed,
    };
    commands::cmd_synthesize(&opts, &out).map_err(py_err)
}

/// Trains one model; returns the test metrics record.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let art = py.detach(|| commands::cmd_train(&cfg)).map_err(py_err)?;
    serialize_py(py, &art.metrics)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, data, dump=None, force=false))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf, dump: Option<PathBuf>, force: bool) -> PyResult<Py<PyAny>> {
    let m = py
        .detach(|| commands::cmd_evaluate(&checkpoint, &data, dump.as_deref(), force))
        .map_err(py_err)?;
    serialize_py(py, &m)
}

/// Trains graph and plain arms over `seeds`; returns the comparison report.
#[pyfunction]
#[pyo3(signature = (config, seeds, placebo=false))]
fn compare(py: Python<'_>, config: &PyRunConfig, seeds: Vec<u64>, placebo: bool) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let outcome = py.detach(|| commands::cmd_compare(&cfg, &seeds, placebo)).map_err(py_err)?;
    serialize_py(py, &outcome.report)
}

#[pyfunction]
#[pyo3(signature = (graph, data=None))]
fn inspect_graph(graph: PathBuf, data: Option<PathBuf>) -> PyResult<String> {
    commands::cmd_inspect_graph(&graph, data.as_deref()).map_err(py_err)
}

#[pymodule]
fn kgeformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_graph, m)?)?;
    Ok(())
}
