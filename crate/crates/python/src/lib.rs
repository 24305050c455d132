//! Python bindings. Matrices cross the boundary as lists of rows, reports
//! as plain dicts.

use std::path::PathBuf;

use kvevict::harness::{self, RecallConfig, RecallWorkload};
use kvevict::oracle::{self, PruneKind, PruneMode, Semantics};
use kvevict::policy::{self, Phase, Preset};
use kvevict::workload::{self, NeedleSpec, Precision, TraceHeader, TraceSpec, TraceTensors};
use kvevict::{saliency, AttentionInstance, ErrorClass, Matrix, SaliencyVector, ScorerKind, TokenStep};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// `(q, k, v)` rows, one tuple per token.
type Steps = Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>;

create_exception!(kvevict, ConfigError, PyValueError, "Invalid parameters or configuration.");
create_exception!(kvevict, DataError, PyValueError, "Malformed or inconsistent input data.");

fn raise(e: kvevict::Error) -> PyErr {
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(e.to_string()),
        ErrorClass::Io => PyOSError::new_err(e.to_string()),
        ErrorClass::Data => DataError::new_err(e.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for kvevict::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(raise)
    }
}

fn config<T>(msg: impl Into<String>) -> PyResult<T> {
    Err(ConfigError::new_err(msg.into()))
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DataError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).or_raise()
}

fn scorer(name: &str) -> PyResult<ScorerKind> {
    name.parse().or_raise()
}

fn prune_mode(kind: &str, semantics: &str) -> PyResult<PruneMode> {
    let kind = match kind {
        "value" => PruneKind::Value,
        "key" => PruneKind::Key,
        "joint" => PruneKind::Joint,
        other => return config(format!("unknown prune kind `{other}` (expected value, key or joint)")),
    };
    let semantics = match semantics {
        "zero_row" => Semantics::ZeroRow,
        "remove_row" => Semantics::RemoveRow,
        other => return config(format!("unknown semantics `{other}` (expected zero_row or remove_row)")),
    };
    Ok(PruneMode::new(kind, semantics))
}

fn phase(name: &str) -> PyResult<Phase> {
    match name {
        "prefill" => Ok(Phase::Prefill),
        "decode" => Ok(Phase::Decode),
        other => config(format!("unknown phase `{other}` (expected prefill or decode)")),
    }
}

/// One attention head: `q`, `k`, `v` and the derived logits, weights and outputs.
#[pyclass(name = "AttentionInstance", module = "kvevict", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: AttentionInstance,
}

#[pymethods]
impl PyInstance {
    #[new]
    #[pyo3(signature = (q, k, v, causal = true, scale = None))]
    fn new(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, causal: bool, scale: Option<f64>) -> PyResult<Self> {
        let (q, k, v) = (matrix(q)?, matrix(k)?, matrix(v)?);
        let inner = match scale {
            Some(s) => AttentionInstance::compute_scaled(q, k, v, causal, s),
            None => AttentionInstance::compute(q, k, v, causal),
        }
        .or_raise()?;
        Ok(Self { inner })
    }

    /// Gaussian instance; `q_len` defaults to `s`.
    #[staticmethod]
    #[pyo3(signature = (s, d, q_len = None, seed = 0))]
    fn random(s: usize, d: usize, q_len: Option<usize>, seed: u64) -> PyResult<Self> {
        let inner = workload::try_gen_random(s, d, q_len.unwrap_or(s), seed).or_raise()?;
        Ok(Self { inner })
    }

    /// Planted-needle prefill instance plus the first decode query.
    #[staticmethod]
    #[pyo3(signature = (s = NeedleSpec::DEFAULT_LEN, d = NeedleSpec::DEFAULT_DIM, seed = 0))]
    fn needle(s: usize, d: usize, seed: u64) -> PyResult<(Self, Vec<f64>)> {
        let (inner, truth) = workload::gen_needle(&NeedleSpec::with_shape(s, d, seed)).or_raise()?;
        Ok((Self { inner }, truth))
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        self.inner.q.to_rows()
    }
    #[getter]
    fn k(&self) -> Vec<Vec<f64>> {
        self.inner.k.to_rows()
    }
    #[getter]
    fn v(&self) -> Vec<Vec<f64>> {
        self.inner.v.to_rows()
    }
    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        self.inner.z.to_rows()
    }
    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        self.inner.a.to_rows()
    }
    #[getter]
    fn o(&self) -> Vec<Vec<f64>> {
        self.inner.o.to_rows()
    }
    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    #[getter]
    fn q_len(&self) -> usize {
        self.inner.q_len()
    }
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    #[getter]
    fn q_offset(&self) -> usize {
        self.inner.q_offset()
    }
    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }
    #[getter]
    fn causal(&self) -> bool {
        self.inner.causal
    }

    fn __repr__(&self) -> String {
        format!("AttentionInstance(seq_len={}, q_len={}, dim={})", self.seq_len(), self.q_len(), self.dim())
    }
}

/// Per-position scores (`value`, `key`, `joint` or `attn_l1`) over window rows `window_start..`.
#[pyfunction]
#[pyo3(signature = (inst, scorer_name, window_start = 1))]
fn score(inst: &PyInstance, scorer_name: &str, window_start: usize) -> PyResult<Vec<f64>> {
    Ok(saliency::score(&inst.inner, scorer(scorer_name)?, window_start).or_raise()?.scores)
}

/// The three additive terms of the joint score.
#[pyfunction]
#[pyo3(signature = (inst, window_start = 1))]
fn joint_parts(py: Python<'_>, inst: &PyInstance, window_start: usize) -> PyResult<Py<PyDict>> {
    let parts = saliency::joint_parts(&inst.inner, window_start).or_raise()?;
    let d = PyDict::new(py);
    d.set_item("value", parts.value)?;
    d.set_item("key", parts.key)?;
    d.set_item("cross", parts.cross)?;
    Ok(d.unbind())
}

/// 1-based start of a window covering the last `size` query rows.
#[pyfunction]
fn window_start_for_size(q_len: usize, size: usize) -> usize {
    kvevict::window_start_for_size(q_len, size)
}

/// Exact windowed output error for pruning each position in turn.
#[pyfunction]
#[pyo3(signature = (inst, kind = "joint", semantics = "remove_row", window_start = 1))]
fn exact_eviction_errors(inst: &PyInstance, kind: &str, semantics: &str, window_start: usize) -> PyResult<Vec<f64>> {
    oracle::exact_eviction_errors(&inst.inner, prune_mode(kind, semantics)?, window_start).or_raise()
}

/// Error in the next query's output when each prefix position is evicted.
#[pyfunction]
fn true_eviction_errors(inst: &PyInstance, next_query: Vec<f64>) -> PyResult<Vec<f64>> {
    oracle::true_eviction_errors(&inst.inner, &next_query).or_raise()
}

/// `(eps, loss, ratio)` for scaling position `p` by `1 - eps`; ratio near 1 confirms the closed form.
#[pyfunction]
#[pyo3(signature = (inst, p, kind = "joint", window_start = 1, eps = vec![1e-2, 1e-3, 1e-4]))]
fn taylor_residual(
    inst: &PyInstance,
    p: usize,
    kind: &str,
    window_start: usize,
    eps: Vec<f64>,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let pts = oracle::taylor_residual(&inst.inner, p, prune_mode(kind, "zero_row")?, window_start, &eps).or_raise()?;
    Ok(pts.into_iter().map(|t| (t.eps, t.loss, t.ratio)).collect())
}

/// Top-k overlap; `reserve` always-kept trailing positions on the candidate side.
#[pyfunction]
#[pyo3(signature = (reference, candidate, k, reserve = 0))]
fn topk_recall(reference: Vec<f64>, candidate: Vec<f64>, k: usize, reserve: usize) -> PyResult<f64> {
    let r = SaliencyVector::new(reference, ScorerKind::Joint, 1);
    let c = SaliencyVector::new(candidate, ScorerKind::Joint, 1);
    oracle::topk_recall_reserved(&r, &c, k, reserve).or_raise()
}

#[pyclass(name = "PolicyConfig", module = "kvevict", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicyConfig {
    inner: policy::PolicyConfig,
}

#[pymethods]
impl PyPolicyConfig {
    #[new]
    #[pyo3(signature = (
        budget, scorer = "attn_l1", *, sink_count = 0, recent_window = 0, window_start = 1,
        pool_kernel = 1, pool_stride = 1, num_coming = 0, accumulate = true, clamp_joint = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        budget: usize,
        scorer: &str,
        sink_count: usize,
        recent_window: usize,
        window_start: usize,
        pool_kernel: usize,
        pool_stride: usize,
        num_coming: usize,
        accumulate: bool,
        clamp_joint: bool,
    ) -> PyResult<Self> {
        let inner = policy::PolicyConfig {
            budget,
            sink_count,
            recent_window,
            window_start,
            pool_kernel,
            pool_stride,
            scorer: self::scorer(scorer)?,
            num_coming,
            accumulate,
            clamp_joint,
        };
        inner.validate().or_raise()?;
        Ok(Self { inner })
    }

    /// Named scheme such as `h2o`, `tova`, `snapkv`, `key` or `joint@tova`.
    #[staticmethod]
    #[pyo3(signature = (name, budget, phase = "decode", context = 0))]
    fn preset(name: &str, budget: usize, phase: &str, context: usize) -> PyResult<Self> {
        let p: Preset = name.parse().or_raise()?;
        Ok(Self { inner: policy::preset(p, self::phase(phase)?, context, budget).or_raise()? })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.budget
    }
    #[getter]
    fn scorer(&self) -> &'static str {
        self.inner.scorer.as_str()
    }
    #[getter]
    fn sink_count(&self) -> usize {
        self.inner.sink_count
    }
    #[getter]
    fn recent_window(&self) -> usize {
        self.inner.recent_window
    }
    #[getter]
    fn window_start(&self) -> usize {
        self.inner.window_start
    }

    fn __repr__(&self) -> String {
        format!("PolicyConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// Retained and evicted slots for one eviction over `scores`.
#[pyfunction]
fn select_retained(scores: Vec<f64>, config: &PyPolicyConfig) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let len = scores.len();
    let sv = SaliencyVector::new(scores, config.inner.scorer, config.inner.window_start);
    let d = policy::select_retained(&sv, len, &config.inner).or_raise()?;
    Ok((d.retained, d.evicted))
}

#[pyfunction]
fn pool_scores(scores: Vec<f64>, kernel: usize, stride: usize) -> PyResult<Vec<f64>> {
    let sv = SaliencyVector::new(scores, ScorerKind::AttnL1, 1);
    Ok(policy::pool_scores(&sv, kernel, stride).or_raise()?.scores)
}

/// Token-by-token decode with eviction after every append.
#[pyclass(name = "DecodeSimulator", module = "kvevict")]
struct PyDecodeSimulator {
    inner: policy::DecodeSimulator,
}

#[pymethods]
impl PyDecodeSimulator {
    #[new]
    fn new(d: usize, config: &PyPolicyConfig) -> PyResult<Self> {
        Ok(Self { inner: policy::DecodeSimulator::new(d, config.inner.clone()).or_raise()? })
    }

    fn step(&mut self, py: Python<'_>, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> PyResult<Py<PyDict>> {
        let r = self.inner.step(&q, &k, &v).or_raise()?;
        let d = PyDict::new(py);
        d.set_item("step", r.step)?;
        d.set_item("output", r.output)?;
        d.set_item("len_before", r.len_before)?;
        d.set_item("len_after", r.len_after)?;
        d.set_item("evicted_slots", r.decision.evicted)?;
        d.set_item("evicted_positions", r.evicted_positions)?;
        Ok(d.unbind())
    }

    /// Original positions currently cached, oldest first.
    #[getter]
    fn positions(&self) -> Vec<usize> {
        self.inner.cache().positions().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.cache().len()
    }
}

fn token_steps(steps: Steps) -> Vec<TokenStep> {
    steps.into_iter().map(|(q, k, v)| TokenStep { q, k, v }).collect()
}

/// Decode report (per-step perturbation against the full cache) for `(q, k, v)` steps.
#[pyfunction]
#[pyo3(signature = (steps, config, name = "custom"))]
fn simulate_decode(py: Python<'_>, steps: Steps, config: &PyPolicyConfig, name: &str) -> PyResult<Py<PyAny>> {
    let report = harness::simulate_decode(&token_steps(steps), &config.inner, name).or_raise()?;
    to_py(py, &report)
}

/// Structured decode workload as `(q, k, v)` steps.
#[pyfunction]
#[pyo3(signature = (steps, d = 32, seed = 0))]
fn decode_workload(steps: usize, d: usize, seed: u64) -> PyResult<Steps> {
    let spec = workload::DecodeSpec { d, ..workload::DecodeSpec::standard(steps, seed) };
    let trace = workload::gen_decode_workload(&spec).or_raise()?;
    Ok(trace.into_iter().map(|t| (t.q, t.k, t.v)).collect())
}

/// Recall of every scorer against the exact oracle over many instances.
#[pyfunction]
#[pyo3(signature = (
    workload = "needle", s = NeedleSpec::DEFAULT_LEN, d = NeedleSpec::DEFAULT_DIM, *,
    instances = 100, first_seed = 0, ks = vec![4], windows = vec![1, 4, 16, 64], reserves = vec![0, 2],
    scorers = None
))]
#[allow(clippy::too_many_arguments)]
fn oracle_recall(
    py: Python<'_>,
    workload: &str,
    s: usize,
    d: usize,
    instances: usize,
    first_seed: u64,
    ks: Vec<usize>,
    windows: Vec<usize>,
    reserves: Vec<usize>,
    scorers: Option<Vec<String>>,
) -> PyResult<Py<PyAny>> {
    let workload = match workload {
        "needle" => RecallWorkload::Needle { s, d },
        "random" => RecallWorkload::Random { s, d },
        other => return config(format!("unknown workload `{other}` (expected needle or random)")),
    };
    let scorers = match scorers {
        Some(list) => list.iter().map(|n| scorer(n)).collect::<PyResult<_>>()?,
        None => RecallConfig::needle_default().scorers,
    };
    let cfg = RecallConfig { workload, first_seed, instances, ks, scorers, windows, reserves };
    let report = py.detach(|| harness::oracle_recall(&cfg)).or_raise()?;
    to_py(py, &report)
}

/// A multi-layer, multi-head trace file held in memory.
#[pyclass(name = "Trace", module = "kvevict", frozen)]
struct PyTrace {
    header: TraceHeader,
    tensors: TraceTensors,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let (header, tensors) = workload::read_trace(&path).or_raise()?;
        Ok(Self { header, tensors })
    }

    #[staticmethod]
    #[pyo3(signature = (
        *, layers = 2, kv_heads = 2, q_heads = 4, d = 16, prompt_len = 64, decode_len = 16,
        precision = "f32", seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        layers: usize,
        kv_heads: usize,
        q_heads: usize,
        d: usize,
        prompt_len: usize,
        decode_len: usize,
        precision: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let precision: Precision = precision.parse().or_raise()?;
        let spec = TraceSpec {
            num_layers: layers,
            num_kv_heads: kv_heads,
            num_q_heads: q_heads,
            d,
            prompt_len,
            decode_len,
            precision,
            seed,
        };
        let (header, tensors) = workload::gen_trace(&spec).or_raise()?;
        Ok(Self { header, tensors })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        workload::write_trace(&path, &self.header, &self.tensors).or_raise()
    }

    #[getter]
    fn header(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.header)
    }

    /// Causal prefill instance over the prompt rows of one query head.
    fn instance(&self, layer: usize, q_head: usize) -> PyResult<PyInstance> {
        let inner = workload::trace_instance(&self.header, &self.tensors, layer, q_head).or_raise()?;
        Ok(PyInstance { inner })
    }

    /// All rows of one query head as `(q, k, v)` steps.
    fn steps(&self, layer: usize, q_head: usize) -> PyResult<Steps> {
        let steps = workload::trace_steps(&self.header, &self.tensors, layer, q_head).or_raise()?;
        Ok(steps.into_iter().map(|t| (t.q, t.k, t.v)).collect())
    }
}

#[pymodule]
#[pyo3(name = "kvevict")]
pub fn kvevict_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyPolicyConfig>()?;
    m.add_class::<PyDecodeSimulator>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(joint_parts, m)?)?;
    m.add_function(wrap_pyfunction!(window_start_for_size, m)?)?;
    m.add_function(wrap_pyfunction!(exact_eviction_errors, m)?)?;
    m.add_function(wrap_pyfunction!(true_eviction_errors, m)?)?;
    m.add_function(wrap_pyfunction!(taylor_residual, m)?)?;
    m.add_function(wrap_pyfunction!(topk_recall, m)?)?;
    m.add_function(wrap_pyfunction!(select_retained, m)?)?;
    m.add_function(wrap_pyfunction!(pool_scores, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_decode, m)?)?;
    m.add_function(wrap_pyfunction!(decode_workload, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_recall, m)?)?;
    Ok(())
}
