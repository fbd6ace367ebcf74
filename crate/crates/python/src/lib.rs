//! Python bindings: scenarios, environments, training, adaptation and bound checks.

use std::path::PathBuf;

use mrcom::meta_env::{self, MorphologyId, ObsTransform};
use mrcom::numerics::RngStream;
use mrcom::pipeline::{self, Metrics, PipelineConfig, TrainedModel as CoreTrained, Trainer as CoreTrainer};
use mrcom::theory::{self, BoundInputs as CoreBounds, VerifyConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: mrcom::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// Converts any serializable value into plain Python objects via `json`.
fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// One scenario: morphology, dynamics parameters, target speed and observation transform.
#[pyclass(module = "mrcom", from_py_object)]
#[derive(Clone)]
struct ScenarioSpec {
    inner: meta_env::ScenarioSpec,
}

#[pymethods]
impl ScenarioSpec {
    /// Default dynamics for `morphology` ("hop", "walk" or "dash").
    #[staticmethod]
    #[pyo3(signature = (morphology, v_target=1.0))]
    fn default_for(morphology: &str, v_target: f64) -> PyResult<Self> {
        Ok(Self {
            inner: meta_env::ScenarioSpec::default_for(parse(morphology)?, v_target),
        })
    }

    /// Draws dynamics from the `alpha`/`beta` ranges.
    #[staticmethod]
    fn sample(morphology: &str, alpha: f64, beta: f64, seed: u64) -> PyResult<Self> {
        let m: MorphologyId = parse(morphology)?;
        let inner = meta_env::sample_scenario(m, alpha, beta, &mut RngStream::new(seed, 0)).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn with_id(&self, id: usize) -> Self {
        Self {
            inner: self.inner.clone().with_id(id),
        }
    }

    fn with_transform(&self, transform: &str) -> PyResult<Self> {
        let t: ObsTransform = parse(transform)?;
        Ok(Self {
            inner: self.inner.clone().with_transform(t),
        })
    }

    #[getter]
    fn id(&self) -> usize {
        self.inner.id
    }

    #[getter]
    fn morphology(&self) -> &'static str {
        self.inner.morphology.as_str()
    }

    #[getter]
    fn transform(&self) -> &'static str {
        self.inner.transform.as_str()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    #[getter]
    fn act_dim(&self) -> usize {
        self.inner.act_dim()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("ScenarioSpec(id={}, morphology={}, transform={})", self.inner.id, self.inner.morphology, self.inner.transform)
    }
}

/// An ordered scenario list with a line-per-record text format.
#[pyclass(module = "mrcom", from_py_object)]
#[derive(Clone)]
struct ScenarioSet {
    inner: meta_env::ScenarioSet,
}

#[pymethods]
impl ScenarioSet {
    #[staticmethod]
    #[pyo3(signature = (morphologies, per_morphology, alpha, beta, seed, transform="none"))]
    fn sample(morphologies: Vec<String>, per_morphology: usize, alpha: f64, beta: f64, seed: u64, transform: &str) -> PyResult<Self> {
        let ms = morphologies.iter().map(|m| parse(m)).collect::<PyResult<Vec<MorphologyId>>>()?;
        let inner = meta_env::ScenarioSet::sample(&ms, per_morphology, alpha, beta, parse(transform)?, 0, &mut RngStream::new(seed, 50)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: meta_env::ScenarioSet::from_text(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<ScenarioSpec> {
        self.inner
            .scenarios
            .get(i)
            .map(|s| ScenarioSpec { inner: s.clone() })
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))
    }
}

/// A simulated scenario; `step` returns `(obs, reward, done)`.
#[pyclass(module = "mrcom")]
struct Env {
    inner: meta_env::Env,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (spec, stream=0))]
    fn new(spec: &ScenarioSpec, stream: u64) -> Self {
        Self {
            inner: meta_env::Env::new(spec.inner.clone(), stream),
        }
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset()
    }

    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool)> {
        let r = self.inner.step(&action).map_err(py_err)?;
        Ok((r.obs, r.reward, r.done))
    }
}

/// Raw episode return mapped onto the random = 0, expert = 100 scale of `spec`.
#[pyfunction]
fn normalized_return(spec: &ScenarioSpec, raw: f64) -> PyResult<f64> {
    let a = meta_env::anchors(&spec.inner).map_err(py_err)?;
    meta_env::normalized_return(raw, &a).map_err(py_err)
}

/// Model, training and agent settings; `preset` is "large", "small" or "tiny".
#[pyclass(module = "mrcom", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (preset="small"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "large" => PipelineConfig::default(),
            "small" => PipelineConfig::small(),
            "tiny" => PipelineConfig::tiny(),
            other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: PipelineConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("configs serialize")
    }

    /// Applies an ablation ("full", "wo_d", "wo_c", "wo_ls", "wo_lv").
    fn with_variant(&self, variant: &str) -> PyResult<Self> {
        let v: pipeline::Variant = parse(variant)?;
        let mut inner = self.inner.clone();
        inner.model = v.apply(&inner.model);
        Ok(Self { inner })
    }

    #[getter]
    fn outer_iters(&self) -> usize {
        self.inner.train.outer_iters
    }

    #[setter]
    fn set_outer_iters(&mut self, n: usize) {
        self.inner.train.outer_iters = n;
    }

    #[getter]
    fn adapt_steps(&self) -> usize {
        self.inner.train.adapt_steps
    }

    #[setter]
    fn set_adapt_steps(&mut self, n: usize) {
        self.inner.train.adapt_steps = n;
    }
}

fn metrics_list(py: Python<'_>, ms: &[Metrics]) -> PyResult<Py<PyAny>> {
    to_py(py, &ms)
}

/// World-model training over a scenario set.
#[pyclass(module = "mrcom")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &Config, scenarios: &ScenarioSet, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTrainer::new(&config.inner, &scenarios.inner, seed).map_err(py_err)?,
        })
    }

    /// Restores a run written by `save` with the same config, scenarios and seed.
    #[staticmethod]
    fn load(path: PathBuf, config: &Config, scenarios: &ScenarioSet, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTrainer::load(&path, &config.inner, &scenarios.inner, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration()
    }

    /// One outer iteration; returns its metrics as a dict.
    fn run_iteration(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let m = self.inner.run_iteration().map_err(py_err)?;
        to_py(py, &m)
    }

    /// Remaining iterations; returns one metrics dict per iteration.
    fn run(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let mut out = Vec::new();
        self.inner.run(&mut |m| out.push(m.clone())).map_err(py_err)?;
        metrics_list(py, &out)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn finish(&self) -> TrainedModel {
        TrainedModel { inner: self.inner.finish() }
    }
}

/// A trained world model with its meta-value head.
#[pyclass(module = "mrcom")]
struct TrainedModel {
    inner: CoreTrained,
}

#[pymethods]
impl TrainedModel {
    /// Adapts a fresh policy to `target`; returns a dict with the normalized
    /// return, step counts and per-iteration metrics.
    fn adapt(&self, py: Python<'_>, target: &ScenarioSpec, seed: u64) -> PyResult<Py<PyAny>> {
        let mut log = Vec::new();
        let a = pipeline::adapt(&self.inner, &target.inner, seed, &mut |m| log.push(m.clone())).map_err(py_err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("normalized_return", a.normalized_return)?;
        d.set_item("real_steps", a.real_steps)?;
        d.set_item("model_transitions", a.model_transitions)?;
        d.set_item("metrics", metrics_list(py, &log)?)?;
        Ok(d.into_any().unbind())
    }

    /// Linear-probe R² from the stochastic latent to the injected noise of an `addd` scenario.
    #[pyo3(signature = (spec, episodes=4, steps=100, seed=0))]
    fn noise_probe_r2(&self, spec: &ScenarioSpec, episodes: usize, steps: usize, seed: u64) -> PyResult<f64> {
        pipeline::noise_probe_r2(&self.inner, &spec.inner, episodes, steps, seed).map_err(py_err)
    }
}

/// Errors and sensitivities entering the generalization bounds.
#[pyclass(module = "mrcom", from_py_object)]
#[derive(Clone)]
struct BoundInputs {
    inner: CoreBounds,
}

#[pymethods]
impl BoundInputs {
    #[new]
    #[pyo3(signature = (eps_t, eps_s, eps_pi, c_t, c_pi, r, gamma))]
    fn new(eps_t: f64, eps_s: f64, eps_pi: f64, c_t: f64, c_pi: f64, r: f64, gamma: f64) -> PyResult<Self> {
        let inner = CoreBounds {
            eps_t,
            eps_s,
            eps_pi,
            c_t,
            c_pi,
            r,
            gamma,
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn dyn_bound(&self) -> f64 {
        theory::lemma_dyn_bound(&self.inner)
    }

    fn policy_bound(&self) -> f64 {
        theory::lemma_policy_bound(&self.inner)
    }

    fn perf_bound(&self) -> f64 {
        theory::lemma_perf_bound(&self.inner)
    }

    fn gen_bound(&self) -> f64 {
        theory::theorem_gen_bound(&self.inner)
    }
}

#[pyfunction]
fn tv_distance(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    theory::tv_distance(&p, &q).map_err(py_err)
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    theory::kl_divergence(&p, &q).map_err(py_err)
}

/// Runs every numerical bound check; `trials` overrides all trial counts.
#[pyfunction]
#[pyo3(signature = (seed=0, trials=None))]
fn verify_bounds(py: Python<'_>, seed: u64, trials: Option<usize>) -> PyResult<Py<PyAny>> {
    let mut cfg = VerifyConfig::default();
    if let Some(n) = trials {
        cfg = cfg.with_trials(n);
    }
    let report = theory::verify_all(&cfg, seed).map_err(py_err)?;
    let d = to_py(py, &report)?;
    d.bind(py).set_item("violations", report.violations())?;
    Ok(d)
}

#[pyfunction]
fn linear_probe_r2(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    pipeline::linear_probe_r2(&x, &y).map_err(py_err)
}

#[pymodule(name = "mrcom")]
fn mrcom_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ScenarioSpec>()?;
    m.add_class::<ScenarioSet>()?;
    m.add_class::<Env>()?;
    m.add_class::<Config>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<TrainedModel>()?;
    m.add_class::<BoundInputs>()?;
    m.add_function(wrap_pyfunction!(normalized_return, m)?)?;
    m.add_function(wrap_pyfunction!(tv_distance, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe_r2, m)?)?;
    m.add("MORPHOLOGIES", MorphologyId::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
