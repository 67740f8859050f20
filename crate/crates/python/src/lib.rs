//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists (via JSON); long computations release the GIL.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;
use trustshift_core::agents::{self, run_simulation, SimConfig};
use trustshift_core::analysis::stats::{self, MwuMethod};
use trustshift_core::analysis::{self as analysis_core, Strictness};
use trustshift_core::content::Content;
use trustshift_core::dataset::{self, FeatureSchema, StudentRecord};
use trustshift_core::explainer::{self, ExplanationCache};
use trustshift_core::pipeline::{self, PipelineConfig, TrainedModels};
use trustshift_core::predictor::{AiQuality, Predict};
use trustshift_core::protocol::{self, CreateSession, Submission};
use trustshift_core::scoring::{self, ScoreConfig};
use trustshift_core::service::{
    ExperimentService, IdSource, ManualClock, ServiceConfig, SystemClock,
};
use trustshift_core::store;

create_exception!(trustshift, TrustshiftError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    TrustshiftError::new_err(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py
        .import("json")?
        .call_method1("dumps", (value,))?
        .extract()?;
    serde_json::from_str(&text).map_err(invalid)
}

fn quality(name: &str) -> PyResult<AiQuality> {
    match name.to_ascii_lowercase().as_str() {
        "good" => Ok(AiQuality::Good),
        "poor" => Ok(AiQuality::Poor),
        other => Err(invalid(format!(
            "quality must be 'good' or 'poor', got {other:?}"
        ))),
    }
}

fn pipeline_config(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<PipelineConfig> {
    match config {
        Some(c) => from_py(py, c),
        None => Ok(PipelineConfig::default()),
    }
}

/// Shipped feature schema as a dict.
#[pyfunction]
fn feature_schema(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &FeatureSchema::student())
}

/// One-hot / integer encoding of 30 raw feature values (43 numbers).
#[pyfunction]
fn encode(values: Vec<i32>) -> PyResult<Vec<f64>> {
    let record = StudentRecord {
        id: "py".into(),
        values,
        grade: 0,
    };
    Ok(FeatureSchema::student()
        .encode(&record)
        .map_err(invalid)?
        .components)
}

/// Stand-in student records as dicts `{id, values, grade}`.
#[pyfunction]
#[pyo3(signature = (rows = dataset::SYNTHETIC_ROWS, seed = 395))]
fn synthetic_students(py: Python<'_>, rows: usize, seed: u64) -> PyResult<Py<PyAny>> {
    to_py(py, &dataset::synthetic_students(rows, seed))
}

/// Load a semicolon-separated student-performance file.
#[pyfunction]
#[pyo3(signature = (path, course = "math"))]
fn load_dataset(py: Python<'_>, path: PathBuf, course: &str) -> PyResult<Py<PyAny>> {
    let course = match course {
        "math" => dataset::Course::Math,
        "portuguese" => dataset::Course::Portuguese,
        other => return Err(invalid(format!("unknown course {other:?}"))),
    };
    let records = dataset::load_dataset(path, &FeatureSchema::student(), course).map_err(err)?;
    to_py(py, &records)
}

#[pyclass(frozen, module = "trustshift")]
struct Models {
    inner: TrainedModels,
}

#[pymethods]
impl Models {
    /// Train the Good and Poor networks. `config` is a pipeline config dict;
    /// missing keys take their defaults.
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn train(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Models> {
        let cfg = pipeline_config(py, config)?;
        let inner = py
            .detach(|| pipeline::train_models(&FeatureSchema::student(), &cfg))
            .map_err(err)?;
        Ok(Models { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Models> {
        Ok(Models {
            inner: TrainedModels::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    /// Seed attempts and held-out RMSE of both networks.
    fn report(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.report)
    }

    fn fingerprint(&self, quality_name: &str) -> PyResult<String> {
        Ok(match quality(quality_name)? {
            AiQuality::Good => self.inner.good.fingerprint(),
            AiQuality::Poor => self.inner.poor.fingerprint(),
        })
    }

    /// Grade predicted by one network for 30 raw feature values.
    fn predict(&self, quality_name: &str, values: Vec<i32>) -> PyResult<f64> {
        let x = encode(values)?;
        Ok(match quality(quality_name)? {
            AiQuality::Good => self.inner.good.predict(&x),
            AiQuality::Poor => self.inner.poor.predict(&x),
        })
    }

    /// Ids of the 30 training and 31 testing stimuli.
    fn stimulus_ids(&self) -> Vec<String> {
        self.inner.stimuli().into_iter().map(|r| r.id).collect()
    }

    #[pyo3(signature = (config = None))]
    fn explain(&self, py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Explanations> {
        let cfg: explainer::ExplainerConfig = match config {
            Some(c) => from_py(py, c)?,
            None => Default::default(),
        };
        let cache = py
            .detach(|| self.inner.explain(&FeatureSchema::student(), &cfg))
            .map_err(err)?;
        Ok(Explanations { inner: cache })
    }
}

#[pyclass(frozen, module = "trustshift")]
struct Explanations {
    inner: ExplanationCache,
}

#[pymethods]
impl Explanations {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Explanations> {
        Ok(Explanations {
            inner: ExplanationCache::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }

    /// Explanation of one stimulus under one network, or None.
    fn get(
        &self,
        py: Python<'_>,
        quality_name: &str,
        stimulus_id: &str,
    ) -> PyResult<Option<Py<PyAny>>> {
        self.inner
            .get(quality(quality_name)?, stimulus_id)
            .map(|e| to_py(py, e))
            .transpose()
    }

    fn entries(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.entries)
    }
}

#[pyclass(frozen, module = "trustshift")]
struct Experiment {
    inner: Arc<protocol::Experiment>,
}

#[pymethods]
impl Experiment {
    #[new]
    fn new(models: &Models, explanations: &Explanations) -> PyResult<Experiment> {
        let exp = models
            .inner
            .clone()
            .experiment(
                FeatureSchema::student(),
                explanations.inner.clone(),
                ScoreConfig::default(),
            )
            .map_err(err)?;
        Ok(Experiment {
            inner: Arc::new(exp),
        })
    }

    /// Load saved networks and their explanation cache.
    #[staticmethod]
    fn load(models_dir: PathBuf, explanations_path: PathBuf) -> PyResult<Experiment> {
        let exp =
            pipeline::load_experiment(&models_dir, &explanations_path, ScoreConfig::default())
                .map_err(err)?;
        Ok(Experiment {
            inner: Arc::new(exp),
        })
    }

    fn training_ids(&self) -> Vec<String> {
        self.inner.training.iter().map(|r| r.id.clone()).collect()
    }

    fn testing_ids(&self) -> Vec<String> {
        self.inner.testing.iter().map(|r| r.id.clone()).collect()
    }
}

/// Session service over a store directory. With `seed`, tokens are
/// reproducible; otherwise they are random.
#[pyclass(frozen, module = "trustshift")]
struct Service {
    inner: ExperimentService,
}

#[pymethods]
impl Service {
    #[new]
    #[pyo3(signature = (experiment, store_dir, seed = None, fsync = true))]
    fn new(
        experiment: &Experiment,
        store_dir: PathBuf,
        seed: Option<u64>,
        fsync: bool,
    ) -> PyResult<Service> {
        let ids = seed.map_or(IdSource::Random, IdSource::seeded);
        let inner = ExperimentService::open(
            experiment.inner.clone(),
            store_dir,
            ServiceConfig {
                fsync,
                ..Default::default()
            },
            Arc::new(SystemClock),
            ids,
        )
        .map_err(err)?;
        Ok(Service { inner })
    }

    /// `request` is `{consent, demographics, likert}`; returns
    /// `{token, condition_code}`.
    fn create_session(&self, py: Python<'_>, request: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let request: CreateSession = from_py(py, request)?;
        let created = self.inner.create_session(&request).map_err(service_err)?;
        to_py(py, &created)
    }

    fn step(&self, py: Python<'_>, token: &str) -> PyResult<Py<PyAny>> {
        let step = self.inner.step(token).map_err(service_err)?;
        to_py(py, &step)
    }

    #[pyo3(signature = (token, submission, idempotency_key = None))]
    fn submit(
        &self,
        py: Python<'_>,
        token: &str,
        submission: &Bound<'_, PyAny>,
        idempotency_key: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let submission: Submission = from_py(py, submission)?;
        let outcome = self
            .inner
            .submit(token, &submission, idempotency_key)
            .map_err(service_err)?;
        to_py(py, &outcome)
    }

    /// Mark idle sessions abandoned; returns how many.
    fn sweep(&self) -> PyResult<usize> {
        self.inner.sweep().map_err(service_err)
    }

    fn results(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.store().load_results().map_err(err)?)
    }
}

fn service_err(e: trustshift_core::service::ServiceError) -> PyErr {
    use trustshift_core::service::ServiceError;
    match e {
        ServiceError::Protocol(protocol::ProtocolError::Invalid(_)) => invalid(e),
        ServiceError::NotFound => pyo3::exceptions::PyKeyError::new_err(e.to_string()),
        _ => err(e),
    }
}

/// Run `agents_per_branch * 12` synthetic agents into a fresh store;
/// returns the number of completed sessions.
#[pyfunction]
#[pyo3(signature = (experiment, store_dir, agents_per_branch = 50, seed = 2024))]
fn simulate(
    py: Python<'_>,
    experiment: &Experiment,
    store_dir: PathBuf,
    agents_per_branch: usize,
    seed: u64,
) -> PyResult<usize> {
    let exp = experiment.inner.clone();
    py.detach(|| {
        let clock = Arc::new(ManualClock::new(1_700_000_000_000));
        let service = ExperimentService::open(
            exp,
            store_dir,
            ServiceConfig {
                fsync: false,
                ..Default::default()
            },
            clock.clone(),
            IdSource::seeded(seed),
        )
        .map_err(err)?;
        let cfg = SimConfig {
            n_agents_per_branch: agents_per_branch,
            seed,
            ..Default::default()
        };
        run_simulation(&service, &clock, &cfg)
            .map(|t| t.len())
            .map_err(err)
    })
}

/// Analysis report for a store directory or results file. With `out_dir`
/// the CSV and JSON outputs are written too.
#[pyfunction]
#[pyo3(signature = (store_path, out_dir = None, strict = true))]
fn analyze(
    py: Python<'_>,
    store_path: PathBuf,
    out_dir: Option<PathBuf>,
    strict: bool,
) -> PyResult<Py<PyAny>> {
    let report = py.detach(|| {
        let sessions: Vec<protocol::Session> =
            store::load_results(&store::results_file(&store_path))
                .map_err(err)?
                .into_iter()
                .map(|r| r.session)
                .collect();
        let strictness = if strict {
            Strictness::Strict
        } else {
            Strictness::Lenient
        };
        let report = analysis_core::branch_report(&sessions, strictness).map_err(err)?;
        if let Some(out) = &out_dir {
            analysis_core::write_outputs(&report, &sessions, out).map_err(err)?;
        }
        Ok::<_, PyErr>(report)
    })?;
    to_py(py, &report)
}

#[pyfunction]
fn preview_score(width: f64) -> PyResult<f64> {
    scoring::preview_score(width, &ScoreConfig::default()).map_err(invalid)
}

#[pyfunction]
fn test_trial_score(truth: f64, lo: f64, hi: f64) -> PyResult<f64> {
    scoring::test_trial_score(truth, lo, hi, &ScoreConfig::default()).map_err(invalid)
}

#[pyfunction]
fn training_trial_score(prediction: f64, truth: f64) -> f64 {
    scoring::training_trial_score(prediction, truth, &ScoreConfig::default())
}

#[pyfunction]
fn golden_scores_csv() -> &'static str {
    scoring::GOLDEN_SCORES_CSV
}

/// Returns `(t, df, p)`.
#[pyfunction]
fn paired_t(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = stats::paired_t(&x, &y).map_err(invalid)?;
    Ok((r.t, r.df, r.p))
}

/// Returns `(u1, u2, p, exact)`. `method` is "auto", "exact" or "asymptotic".
#[pyfunction]
#[pyo3(signature = (x, y, method = "auto"))]
fn mann_whitney_u(x: Vec<f64>, y: Vec<f64>, method: &str) -> PyResult<(f64, f64, f64, bool)> {
    let method = match method {
        "auto" => MwuMethod::Auto,
        "exact" => MwuMethod::Exact,
        "asymptotic" => MwuMethod::Asymptotic,
        other => return Err(invalid(format!("unknown method {other:?}"))),
    };
    let r = stats::mann_whitney_u(&x, &y, method).map_err(invalid)?;
    Ok((r.u1, r.u2, r.p, r.exact))
}

/// Returns `(r, p)`.
#[pyfunction]
fn pearson_r(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::pearson_r(&x, &y).map_err(invalid)?;
    Ok((r.r, r.p))
}

#[pyfunction]
fn bonferroni(p: f64, m: usize) -> f64 {
    stats::bonferroni(p, m)
}

/// Precision-weighted combination of a first estimate and the AI's.
#[pyfunction]
#[pyo3(signature = (first, ai, self_sigma, ai_sigma, gain = 1.0))]
fn combine(first: f64, ai: f64, self_sigma: f64, ai_sigma: f64, gain: f64) -> f64 {
    agents::combine(first, ai, self_sigma, ai_sigma, gain)
}

#[pyfunction]
fn content(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &Content::shipped())
}

#[pymodule]
pub fn trustshift(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TrustshiftError", m.py().get_type::<TrustshiftError>())?;
    m.add("ENCODED_DIM", dataset::ENCODED_DIM)?;
    m.add("N_TRAINING", protocol::N_TRAINING)?;
    m.add("N_TESTING", protocol::N_TESTING)?;
    m.add_class::<Models>()?;
    m.add_class::<Explanations>()?;
    m.add_class::<Experiment>()?;
    m.add_class::<Service>()?;
    m.add_function(wrap_pyfunction!(feature_schema, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_students, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(preview_score, m)?)?;
    m.add_function(wrap_pyfunction!(test_trial_score, m)?)?;
    m.add_function(wrap_pyfunction!(training_trial_score, m)?)?;
    m.add_function(wrap_pyfunction!(golden_scores_csv, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(content, m)?)?;
    Ok(())
}
