//! Python bindings. Structured values cross the boundary as plain
//! dicts and lists (via JSON), policies and traces as opaque classes.

use std::path::{Path, PathBuf};
use std::time::Duration;

use inflight_core::config::{load_toml, ModelConfig, PathContext};
use inflight_core::protocol::{
    run_loopback, serve_engine, verify_transcript, EngineConfig, EngineHandle, Scenario, ScenarioScript, Transcript,
};
use inflight_core::rl_math::experiments::{
    ess_study as core_ess_study, grad_check as core_grad_check, mixed_kl_study as core_mixed_kl_study,
};
use inflight_core::rl_math::{self as rl, MixedPolicySchedule, Policy, RecurrentToyPolicy, TabularPolicy};
use inflight_core::sim::{self, DriftModel, SimConfig, SimTrace};
use inflight_core::throughput::{self as tp, ClusterSpec};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: inflight_core::Error) -> PyErr {
    use inflight_core::Error as E;
    match e {
        E::InvalidInput(_) | E::Infeasible { .. } => PyValueError::new_err(e.to_string()),
        E::File { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn default_assets() -> PathBuf {
    std::env::var_os("INFLIGHT_ASSETS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets"))
}

/// Cluster description for the throughput model.
#[pyclass(name = "ClusterSpec", module = "inflight", skip_from_py_object)]
#[derive(Clone)]
struct PyClusterSpec {
    inner: ClusterSpec,
    lag_cap: Option<u64>,
    lag_grid: Vec<u64>,
}

#[pymethods]
impl PyClusterSpec {
    #[new]
    fn new(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(PyClusterSpec {
            inner: from_py(spec)?,
            lag_cap: None,
            lag_grid: Vec::new(),
        })
    }

    /// Load the `[cluster]` and `[model]` sections of a model config.
    #[staticmethod]
    #[pyo3(signature = (path, assets_dir=None))]
    fn load(path: PathBuf, assets_dir: Option<PathBuf>) -> PyResult<Self> {
        let cfg: ModelConfig = load_toml(&path).map_err(err)?;
        let ctx = PathContext::for_file(&path, &assets_dir.unwrap_or_else(default_assets));
        Ok(PyClusterSpec {
            inner: cfg.cluster.to_spec(&ctx).map_err(err)?,
            lag_cap: cfg.model.lag_cap,
            lag_grid: cfg.model.lag_grid.unwrap_or_default(),
        })
    }

    #[getter]
    fn lag_cap(&self) -> Option<u64> {
        self.lag_cap
    }

    #[getter]
    fn lag_grid(&self) -> Vec<u64> {
        self.lag_grid.clone()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn conventional<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &tp::conv_throughput(&self.inner).map_err(err)?)
    }

    fn pipeline<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &tp::pipeline_throughput(&self.inner).map_err(err)?)
    }

    /// Best pipeline configuration with `g_max <= cap`.
    fn search<'py>(&self, py: Python<'py>, cap: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &tp::search_configs(&self.inner, cap).map_err(err)?)
    }

    #[pyo3(signature = (cap=None))]
    fn case_study<'py>(&self, py: Python<'py>, cap: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let cap = cap
            .or(self.lag_cap)
            .ok_or_else(|| PyValueError::new_err("no lag cap given or configured"))?;
        to_py(py, &tp::case_study(&self.inner, cap).map_err(err)?)
    }

    #[pyo3(signature = (lag_grid=None))]
    fn speedup_vs_lag<'py>(&self, py: Python<'py>, lag_grid: Option<Vec<u64>>) -> PyResult<Bound<'py, PyAny>> {
        let grid = lag_grid.unwrap_or_else(|| self.lag_grid.clone());
        to_py(py, &tp::speedup_vs_lag(&self.inner, &grid).map_err(err)?)
    }
}

/// Maximum pipeline lag in optimizer steps.
#[pyfunction]
fn pipeline_max_lag(
    gen_batch: u64,
    inference_count: u64,
    lengths: &Bound<'_, PyAny>,
    train_batch: u64,
) -> PyResult<u64> {
    let lengths: tp::LengthDistribution = from_py(lengths)?;
    lengths.validate().map_err(err)?;
    Ok(tp::pipeline_max_lag(gen_batch, inference_count, &lengths, train_batch))
}

/// Toy policy: tabular or recurrent.
#[pyclass(name = "Policy", module = "inflight", skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: Policy,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    #[pyo3(signature = (vocab_size, context_order, prompts, scale=1.0, seed=0))]
    fn tabular(vocab_size: usize, context_order: usize, prompts: Vec<u64>, scale: f64, seed: u64) -> PyResult<Self> {
        let p = TabularPolicy::random(vocab_size, context_order, &prompts, scale, seed).map_err(err)?;
        Ok(PyPolicy {
            inner: Policy::Tabular(p),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (vocab_size, hidden_dim, scale=1.0, seed=0))]
    fn recurrent(vocab_size: usize, hidden_dim: usize, scale: f64, seed: u64) -> PyResult<Self> {
        if vocab_size == 0 || hidden_dim == 0 {
            return Err(PyValueError::new_err("vocab_size and hidden_dim must be positive"));
        }
        Ok(PyPolicy {
            inner: Policy::Recurrent(RecurrentToyPolicy::random(vocab_size, hidden_dim, scale, seed)),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: Policy::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_document(text: &str) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: Policy::from_document(text).map_err(err)?,
        })
    }

    fn to_document(&self) -> String {
        self.inner.to_document()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    /// Per-position log-probabilities of `tokens` after `prompt_id`.
    fn logprobs(&self, prompt_id: u64, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        rl::policy_logprobs(&self.inner, prompt_id, &tokens).map_err(err)
    }

    /// `count` checkpoints starting with this policy, each a small random
    /// step from the previous one.
    #[pyo3(signature = (count, magnitude, seed=0))]
    fn drift(&self, count: usize, magnitude: f64, seed: u64) -> Vec<PyPolicy> {
        rl::drifting_checkpoints(&self.inner, count, magnitude, seed)
            .into_iter()
            .map(|inner| PyPolicy { inner })
            .collect()
    }

    #[pyo3(signature = (prompt_id, count, max_len, seed=0, terminator=None))]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        prompt_id: u64,
        count: usize,
        max_len: usize,
        seed: u64,
        terminator: Option<u32>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let t = rl::sample_trajectories(&self.inner, prompt_id, count, max_len, seed, terminator).map_err(err)?;
        to_py(py, &t)
    }

    fn __eq__(&self, other: &PyPolicy) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let kind = match self.inner {
            Policy::Tabular(_) => "tabular",
            Policy::Recurrent(_) => "recurrent",
        };
        format!("Policy({kind}, vocab_size={})", self.inner.vocab_size())
    }
}

fn unwrap_policies(policies: &[PyRef<'_, PyPolicy>]) -> Vec<Policy> {
    policies.iter().map(|p| p.inner.clone()).collect()
}

/// Normalized effective sample size of importance weights.
#[pyfunction]
fn ess(weights: Vec<f64>) -> PyResult<f64> {
    rl::ess(&weights).map_err(err)
}

/// `min(exp(log π - log μ), c)`.
#[pyfunction]
fn truncated_is_weight(pi_logprob_sum: f64, mu_logprob_sum: f64, clamp: f64) -> PyResult<f64> {
    rl::truncated_is_weight(pi_logprob_sum, mu_logprob_sum, clamp).map_err(err)
}

#[pyfunction]
fn log_softmax(logits: Vec<f64>) -> Vec<f64> {
    rl::log_softmax(&logits)
}

/// `KL(p || q)` from log-probabilities.
#[pyfunction]
fn categorical_kl(p_log: Vec<f64>, q_log: Vec<f64>) -> PyResult<f64> {
    if p_log.len() != q_log.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(rl::categorical_kl(&p_log, &q_log))
}

/// Sample under `checkpoints[g]` in segment `g` of a lag schedule.
#[pyfunction]
#[pyo3(signature = (checkpoints, max_len, max_lag, prompt_id, count=1, seed=0, recompute_state=false, terminator=None))]
#[allow(clippy::too_many_arguments)]
fn mixed_policy_sample<'py>(
    py: Python<'py>,
    checkpoints: Vec<PyRef<'py, PyPolicy>>,
    max_len: usize,
    max_lag: usize,
    prompt_id: u64,
    count: usize,
    seed: u64,
    recompute_state: bool,
    terminator: Option<u32>,
) -> PyResult<Bound<'py, PyAny>> {
    let schedule = MixedPolicySchedule::new(max_len, max_lag).map_err(err)?;
    let cps = unwrap_policies(&checkpoints);
    let t = rl::mixed_policy_sample(
        &cps,
        &schedule,
        recompute_state,
        prompt_id,
        count,
        max_len,
        seed,
        terminator,
    )
    .map_err(err)?;
    to_py(py, &t)
}

#[pyfunction]
fn mixed_kl_study<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_mixed_kl_study(&from_py(config)?).map_err(err)?)
}

#[pyfunction]
fn grad_check<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_grad_check(&from_py(config)?).map_err(err)?)
}

#[pyfunction]
fn ess_study<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_ess_study(&from_py(config)?).map_err(err)?)
}

/// Result of a tick-level simulation.
#[pyclass(name = "SimTrace", module = "inflight")]
struct PySimTrace {
    inner: SimTrace,
}

#[pymethods]
impl PySimTrace {
    #[getter]
    fn steps<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.steps)
    }

    #[getter]
    fn ticks<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.ticks)
    }

    /// Token weight versions of every finished sequence, keyed by id.
    fn sequence_versions(&self) -> Vec<(u64, Vec<u64>)> {
        self.inner.sequences.iter().map(|s| (s.id, s.versions())).collect()
    }

    fn steady_state_start(&self) -> Option<usize> {
        sim::steady_state_start(&self.inner)
    }

    /// Per-step batch ESS under a random-walk drift model.
    #[pyo3(signature = (magnitude, seed=0))]
    fn ess_trace(&self, magnitude: f64, seed: u64) -> PyResult<Vec<f64>> {
        sim::ess_trace(&self.inner, &DriftModel { magnitude, seed }).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.steps.len()
    }
}

/// Run the simulator. `config` is a dict or a path to a TOML file.
#[pyfunction]
fn simulate(config: &Bound<'_, PyAny>) -> PyResult<PySimTrace> {
    let cfg: SimConfig = match config.extract::<PathBuf>() {
        Ok(path) => load_toml(&path).map_err(err)?,
        Err(_) => from_py(config)?,
    };
    cfg.validate().map_err(err)?;
    Ok(PySimTrace {
        inner: sim::replay(&cfg).map_err(err)?,
    })
}

/// A generation engine serving on a background thread.
#[pyclass(name = "Engine", module = "inflight")]
struct PyEngine {
    handle: Option<EngineHandle>,
}

impl PyEngine {
    fn handle(&self) -> PyResult<&EngineHandle> {
        self.handle
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("engine is shut down"))
    }
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (policy, bind="127.0.0.1:0".to_string(), recompute_state=false, round_delay_us=0))]
    fn new(policy: &PyPolicy, bind: String, recompute_state: bool, round_delay_us: u64) -> PyResult<Self> {
        let mut cfg = EngineConfig::new(policy.inner.clone());
        cfg.bind = bind;
        cfg.recompute_state = recompute_state;
        cfg.round_delay = Duration::from_micros(round_delay_us);
        Ok(PyEngine {
            handle: Some(serve_engine(cfg).map_err(err)?),
        })
    }

    #[getter]
    fn address(&self) -> PyResult<String> {
        Ok(self.handle()?.addr().to_string())
    }

    #[getter]
    fn weight_version(&self) -> PyResult<u64> {
        Ok(self.handle()?.weight_version())
    }

    fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            h.shutdown();
        }
    }
}

/// Run a scenario script against a fresh in-process engine and return
/// the transcript. `script` holds `actions` and optionally
/// `step_timeout_ms`.
#[pyfunction]
#[pyo3(signature = (policy, checkpoints, script, recompute_state=false, round_delay_us=0))]
fn run_scenario<'py>(
    py: Python<'py>,
    policy: &PyPolicy,
    checkpoints: Vec<PyRef<'py, PyPolicy>>,
    script: &Bound<'py, PyAny>,
    recompute_state: bool,
    round_delay_us: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let script: ScenarioScript = from_py(script)?;
    let scenario = Scenario {
        script,
        checkpoints: unwrap_policies(&checkpoints),
    };
    let mut cfg = EngineConfig::new(policy.inner.clone());
    cfg.recompute_state = recompute_state;
    cfg.round_delay = Duration::from_micros(round_delay_us);
    let transcript = py.detach(|| run_loopback(cfg, &scenario)).map_err(err)?;
    to_py(py, &transcript)
}

/// Recompute every logged log-probability from the policy of its
/// stamped version.
#[pyfunction]
#[pyo3(signature = (transcript, initial, checkpoints, recompute_state=false))]
fn verify<'py>(
    py: Python<'py>,
    transcript: &Bound<'py, PyAny>,
    initial: &PyPolicy,
    checkpoints: Vec<PyRef<'py, PyPolicy>>,
    recompute_state: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let t: Transcript = from_py(transcript)?;
    let policies = t.policies_by_version(&initial.inner, &unwrap_policies(&checkpoints));
    to_py(py, &verify_transcript(&t, &policies, recompute_state))
}

#[pymodule]
fn inflight(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClusterSpec>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PySimTrace>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(pipeline_max_lag, m)?)?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    m.add_function(wrap_pyfunction!(truncated_is_weight, m)?)?;
    m.add_function(wrap_pyfunction!(log_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_kl, m)?)?;
    m.add_function(wrap_pyfunction!(mixed_policy_sample, m)?)?;
    m.add_function(wrap_pyfunction!(mixed_kl_study, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(ess_study, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
