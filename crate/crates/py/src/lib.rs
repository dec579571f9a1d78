//! Python bindings for the scene-graph engine.
//!
//! Structured values cross the boundary as plain Python objects decoded
//! from the engine's JSON form, so dictionaries here match the on-disk
//! artifacts field for field.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use stsg_core::dataset;
use stsg_core::graph;
use stsg_core::parse::{self, PayloadKind};
use stsg_core::pipeline::{self, PipelineConfig, PipelineError, RunOptions, Stage};
use stsg_core::sample;
use stsg_core::split::{self, FrameFeatureStream, SplitParams};
use stsg_core::synth::{self, TemplateRegistry};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// A spatio-temporal scene graph.
#[pyclass(name = "SceneGraph", module = "stsg")]
struct PySceneGraph {
    inner: graph::SpatioTemporalSceneGraph,
}

#[pymethods]
impl PySceneGraph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = graph::from_json(text.as_bytes()).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path)
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        let inner = graph::from_json(&bytes).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        let bytes = graph::to_json(&self.inner).map_err(value_err)?;
        String::from_utf8(bytes).map_err(value_err)
    }

    /// Violation codes; empty when the graph is well formed.
    fn validate(&self) -> Vec<String> {
        graph::validate(&self.inner)
            .codes()
            .into_iter()
            .map(|c| c.as_str().to_string())
            .collect()
    }

    #[getter]
    fn video_id(&self) -> &str {
        &self.inner.video_id
    }

    #[getter]
    fn clip_ids(&self) -> Vec<String> {
        self.inner.clips.iter().map(|c| c.clip_id.clone()).collect()
    }

    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    /// Longest achievable path length for a request of `n` steps.
    fn max_length(&self, n: usize) -> usize {
        sample::GraphIndex::new(&self.inner).max_length(n)
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<PyReasoningPath> {
        let inner = sample::sample_path(&self.inner, n, seed).map_err(value_err)?;
        Ok(PyReasoningPath { inner })
    }

    /// Attach the initial clip's event to `path`, if that clip has one.
    fn contextualize(&self, path: &PyReasoningPath) -> PyReasoningPath {
        PyReasoningPath {
            inner: sample::contextualize(&path.inner, &self.inner).value,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "SceneGraph(video_id={:?}, clips={}, nodes={})",
            self.inner.video_id,
            self.inner.clips.len(),
            self.inner.node_count()
        )
    }
}

/// A sampled multi-step reasoning path.
#[pyclass(name = "ReasoningPath", module = "stsg")]
struct PyReasoningPath {
    inner: sample::ReasoningPath,
}

#[pymethods]
impl PyReasoningPath {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn requested_n(&self) -> usize {
        self.inner.requested_n
    }

    #[getter]
    fn achieved_n(&self) -> usize {
        self.inner.achieved_n
    }

    #[getter]
    fn early_terminated(&self) -> bool {
        self.inner.early_terminated
    }

    #[getter]
    fn answer(&self) -> Option<String> {
        self.inner.answer().map(str::to_string)
    }

    #[getter]
    fn has_temporal_context(&self) -> bool {
        self.inner.temporal_context.is_some()
    }

    /// Steps as `(edge_kind, predicate, focus, introduced)` tuples.
    fn steps(&self) -> Vec<(String, String, String, String)> {
        self.inner
            .steps
            .iter()
            .map(|s| {
                (
                    s.edge_kind.as_str().to_string(),
                    s.predicate.clone(),
                    s.focus.label.clone(),
                    s.introduced.label.clone(),
                )
            })
            .collect()
    }

    /// Render a question / rationale / answer sample from this path.
    #[pyo3(signature = (seed, canonical = false))]
    fn render(&self, seed: u64, canonical: bool) -> PyResult<PyQraSample> {
        let builtin = TemplateRegistry::builtin();
        let inner = if canonical {
            synth::render_qra(&self.inner, &builtin.canonical(), seed)
        } else {
            synth::render_qra(&self.inner, builtin, seed)
        }
        .map_err(value_err)?;
        Ok(PyQraSample { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "ReasoningPath(requested_n={}, achieved_n={}, answer={:?})",
            self.inner.requested_n,
            self.inner.achieved_n,
            self.inner.answer()
        )
    }
}

/// A rendered question / rationale / answer sample.
#[pyclass(name = "QraSample", module = "stsg")]
struct PyQraSample {
    inner: synth::QRASample,
}

#[pymethods]
impl PyQraSample {
    #[getter]
    fn question(&self) -> &str {
        &self.inner.question
    }

    #[getter]
    fn rationale(&self) -> Vec<String> {
        self.inner.rationale.clone()
    }

    #[getter]
    fn answer(&self) -> &str {
        &self.inner.answer
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "QraSample(question={:?}, answer={:?})",
            self.inner.question, self.inner.answer
        )
    }
}

/// Cut indices for a feature stream given as a list of frame vectors.
#[pyfunction]
#[pyo3(signature = (features, threshold = split::DEFAULT_THRESHOLD, min_scene_len = split::DEFAULT_MIN_SCENE_LEN))]
fn detect_cuts(
    features: Vec<Vec<f64>>,
    threshold: f64,
    min_scene_len: usize,
) -> PyResult<Vec<usize>> {
    let stream = FrameFeatureStream::new("video", 1.0, features).map_err(value_err)?;
    let cuts = split::detect_cuts(&stream, threshold, min_scene_len).map_err(value_err)?;
    Ok(cuts.cut_indices)
}

/// Clip plans (frame ranges, spans, keyframes) as dictionaries.
#[pyfunction]
#[pyo3(signature = (features, fps, video_id = "video", threshold = split::DEFAULT_THRESHOLD,
    min_scene_len = split::DEFAULT_MIN_SCENE_LEN, keyframes = split::DEFAULT_KEYFRAMES, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn split_video<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    fps: f64,
    video_id: &str,
    threshold: f64,
    min_scene_len: usize,
    keyframes: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let stream = FrameFeatureStream::new(video_id, fps, features).map_err(value_err)?;
    let params = SplitParams {
        threshold,
        min_scene_len,
        keyframes_per_clip: keyframes,
        seed,
    };
    let plans = split::split_video(&stream, &params).map_err(value_err)?;
    to_py(py, &plans)
}

/// Parse one raw model reply of the given payload kind.
#[pyfunction]
fn parse_model_output<'py>(py: Python<'py>, kind: &str, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let kind: PayloadKind = kind.parse().map_err(value_err)?;
    let payload = parse::parse_model_output(kind, text).map_err(value_err)?;
    to_py(py, &payload)
}

/// Per-step-count sample counts for a target mix.
#[pyfunction]
#[pyo3(signature = (mix, total, seed = 0))]
fn plan_step_mix(
    mix: BTreeMap<usize, f64>,
    total: usize,
    seed: u64,
) -> PyResult<BTreeMap<usize, usize>> {
    let plan = dataset::plan_step_mix(&mix, total, seed).map_err(value_err)?;
    Ok(plan.counts)
}

/// Weighted answer / rationale loss.
#[pyfunction]
fn combine_losses(l_answer: f64, l_rationale: f64, lambda_: f64) -> PyResult<f64> {
    dataset::combine_losses(l_answer, l_rationale, lambda_).map_err(value_err)
}

/// Per-item seed derived from a base seed.
#[pyfunction]
fn derive_seed(seed: u64, index: u64) -> u64 {
    pipeline::derive_seed(seed, index)
}

/// Summary statistics of an exported dataset file.
#[pyfunction]
fn dataset_stats<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let stats = dataset::stats(&path).map_err(|e| match e {
        dataset::DatasetError::Io(..) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    to_py(py, &stats)
}

/// Run the pipeline from a TOML config file and return the run report.
#[pyfunction]
#[pyo3(signature = (config, out = PathBuf::from("runs"), until = "export", resume = true, workers = None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: PathBuf,
    until: &str,
    resume: bool,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let until: Stage = until.parse().map_err(value_err)?;
    let cfg = PipelineConfig::load(&config).map_err(pipeline_err)?;
    let mut options = RunOptions::new(out);
    options.until = until;
    options.resume = resume;
    options.workers = workers;
    let report = py
        .detach(|| pipeline::run_pipeline(&cfg, &options))
        .map_err(pipeline_err)?;
    to_py(py, &report)
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

/// Decode a Python object into a scene graph, for callers holding dicts.
#[pyfunction]
fn scene_graph_from_dict(obj: &Bound<'_, PyAny>) -> PyResult<PySceneGraph> {
    let inner: graph::SpatioTemporalSceneGraph = from_py(obj)?;
    Ok(PySceneGraph { inner })
}

#[pymodule]
fn stsg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ENGINE_VERSION", stsg_core::ENGINE_VERSION)?;
    m.add_class::<PySceneGraph>()?;
    m.add_class::<PyReasoningPath>()?;
    m.add_class::<PyQraSample>()?;
    m.add_function(wrap_pyfunction!(detect_cuts, m)?)?;
    m.add_function(wrap_pyfunction!(split_video, m)?)?;
    m.add_function(wrap_pyfunction!(parse_model_output, m)?)?;
    m.add_function(wrap_pyfunction!(plan_step_mix, m)?)?;
    m.add_function(wrap_pyfunction!(combine_losses, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(scene_graph_from_dict, m)?)?;
    Ok(())
}
