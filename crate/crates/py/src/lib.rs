//! Python bindings. Configs, records and reports cross the boundary as plain
//! dicts and lists with the same field names as the JSON/TOML formats.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use qdistill::augment::{self, QueryRecord};
use qdistill::bench::{bytes_to_gb, index_storage_bytes, StorageSpec};
use qdistill::encoder::{tokenize as tokenize_text, TokenizerConfig};
use qdistill::eval::{self, Qrels, QrelRecord, RetrievalRun, RunRecord};
use qdistill::experiment::{self, FixtureSpec, DEFAULT_SWEEP_FRACTIONS};
use qdistill::losses;
use qdistill::teacher::{estimate_precache_cost as precache_cost, CostModel, Dtype};
use qdistill::trainer::{self, Checkpoint, RunConfig, TrainOutcome};
use qdistill::{EncoderConfig, LossConfig, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(qdistill_py, QdistillError, PyException, "Raised for every qdistill failure; the message starts with the error kind.");

fn err(e: qdistill::Error) -> PyErr {
    QdistillError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_py_or_default<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), from_py)
}

fn parse_enum<T: DeserializeOwned>(name: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {name:?}")))
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Id-keyed teacher embeddings stored as binary16 or binary32.
#[pyclass(name = "TeacherCache", module = "qdistill_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTeacherCache {
    inner: qdistill::TeacherCache,
}

#[pymethods]
impl PyTeacherCache {
    #[new]
    #[pyo3(signature = (kind, dim, dtype = "f16"))]
    fn new(kind: &str, dim: usize, dtype: &str) -> PyResult<Self> {
        let inner = qdistill::TeacherCache::new(parse_enum(kind, "cache kind")?, parse_enum(dtype, "dtype")?, dim)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: qdistill::TeacherCache::read(&path).map_err(err)?,
        })
    }

    /// Header fields without loading the payload.
    #[staticmethod]
    fn header(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
        to_py(py, &qdistill::TeacherCache::read_header(&path).map_err(err)?)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    /// Stores `vector` rounded through the cache dtype.
    fn push(&mut self, id: &str, vector: Vec<f64>) -> PyResult<()> {
        self.inner.push(id, &vector).map_err(err)
    }

    fn get(&self, id: &str) -> PyResult<Vec<f32>> {
        self.inner
            .raw(id)
            .map(<[f32]>::to_vec)
            .map_err(|_| PyKeyError::new_err(id.to_string()))
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn dtype(&self) -> String {
        label(&self.inner.dtype())
    }

    #[getter]
    fn kind(&self) -> String {
        label(&self.inner.kind())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, id: &str) -> bool {
        self.inner.contains(id)
    }

    fn __repr__(&self) -> String {
        format!(
            "TeacherCache(kind={:?}, dtype={:?}, dim={}, len={})",
            self.kind(),
            self.dtype(),
            self.inner.dim(),
            self.inner.len()
        )
    }
}

/// Hashed bag-of-tokens encoder with a two-layer projector.
#[pyclass(name = "StudentEncoder", module = "qdistill_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyStudentEncoder {
    inner: qdistill::StudentEncoder,
}

#[pymethods]
impl PyStudentEncoder {
    /// Seeded initialization of `config` (an `[run.encoder]` dict).
    #[new]
    #[pyo3(signature = (config = None, seed = 42))]
    fn new(config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let cfg: EncoderConfig = from_py_or_default(config)?;
        let inner = qdistill::StudentEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::read(&path).map_err(err)?.into_encoder(),
        })
    }

    /// Unit-norm embedding of `text`.
    fn encode(&self, text: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_text(text).map_err(err)?.into_vec())
    }

    fn encode_batch(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_params()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.params.output_dim()
    }
}

/// A finished training run.
#[pyclass(name = "TrainResult", module = "qdistill_py", skip_from_py_object)]
pub struct PyTrainResult {
    outcome: TrainOutcome,
}

#[pymethods]
impl PyTrainResult {
    /// Encoder at the lowest validation loss.
    #[getter]
    fn encoder(&self) -> PyStudentEncoder {
        PyStudentEncoder {
            inner: self.outcome.checkpoint.to_encoder(),
        }
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.outcome.updates
    }

    #[getter]
    fn best_step(&self) -> u64 {
        self.outcome.checkpoint.step
    }

    #[getter]
    fn val_loss(&self) -> f64 {
        self.outcome.checkpoint.val_loss
    }

    #[getter]
    fn skipped_queries(&self) -> usize {
        self.outcome.skipped_queries
    }

    #[getter]
    fn config_digest(&self) -> String {
        self.outcome.checkpoint.config_digest.clone()
    }

    #[getter]
    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.outcome.metrics)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.outcome.checkpoint.write(&path).map_err(err)
    }
}

/// Synthetic teacher with train/val/test splits.
#[pyclass(name = "Fixture", module = "qdistill_py", skip_from_py_object)]
pub struct PyFixture {
    inner: experiment::Fixture,
}

fn run_config(obj: Option<&Bound<'_, PyAny>>) -> PyResult<RunConfig> {
    let cfg: RunConfig = from_py_or_default(obj)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pymethods]
impl PyFixture {
    /// `spec` is a `[fixture]` dict.
    #[new]
    #[pyo3(signature = (spec = None))]
    fn new(spec: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: FixtureSpec = from_py_or_default(spec)?;
        Ok(Self {
            inner: experiment::build_fixture(&spec).map_err(err)?,
        })
    }

    #[getter]
    fn train_records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.train)
    }

    #[getter]
    fn val_records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.val)
    }

    #[getter]
    fn test_records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.test)
    }

    #[getter]
    fn qrels(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.teacher.qrels.records())
    }

    #[getter]
    fn query_cache(&self) -> PyTeacherCache {
        PyTeacherCache {
            inner: self.inner.teacher.query_cache.clone(),
        }
    }

    #[getter]
    fn doc_cache(&self) -> PyTeacherCache {
        PyTeacherCache {
            inner: self.inner.teacher.doc_cache.clone(),
        }
    }

    /// Trains on the train split; `run` is a `[run]` dict.
    #[pyo3(signature = (run = None))]
    fn train(&self, py: Python<'_>, run: Option<&Bound<'_, PyAny>>) -> PyResult<PyTrainResult> {
        let cfg = run_config(run)?;
        let f = &self.inner;
        let outcome = py
            .detach(|| trainer::train(&cfg, &f.train, &f.val, &f.caches()))
            .map_err(err)?;
        Ok(PyTrainResult { outcome })
    }

    /// NDCG@5 of teacher and student on the test split, with retention.
    fn evaluate(&self, py: Python<'_>, encoder: &PyStudentEncoder) -> PyResult<Py<PyAny>> {
        let f = &self.inner;
        let index = experiment::doc_index(&f.teacher.doc_cache).map_err(err)?;
        let summary = experiment::evaluate(&encoder.inner, &f.test, &f.caches(), &index, &f.teacher.qrels).map_err(err)?;
        to_py(py, &summary)
    }

    #[pyo3(signature = (run = None, fractions = None))]
    fn sweep(&self, py: Python<'_>, run: Option<&Bound<'_, PyAny>>, fractions: Option<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let cfg = run_config(run)?;
        let fractions = fractions.unwrap_or_else(|| DEFAULT_SWEEP_FRACTIONS.to_vec());
        let rows = py
            .detach(|| experiment::data_efficiency_sweep(&cfg, &fractions, &self.inner))
            .map_err(err)?;
        to_py(py, &rows)
    }

    /// Objective grid; `cells` is a list of `{"label", "loss"}` dicts and
    /// defaults to the six-cell ablation.
    #[pyo3(signature = (run = None, cells = None))]
    fn grid(&self, py: Python<'_>, run: Option<&Bound<'_, PyAny>>, cells: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
        let cfg = run_config(run)?;
        let cells: Vec<experiment::GridCell> = match cells {
            Some(c) => from_py(c)?,
            None => LossConfig::ablation_grid()
                .into_iter()
                .map(|(l, loss)| experiment::GridCell { label: l.into(), loss })
                .collect(),
        };
        let pairs: Vec<(&str, LossConfig)> = cells.iter().map(|c| (c.label.as_str(), c.loss)).collect();
        let rows = py
            .detach(|| experiment::objective_grid_with(&cfg, &self.inner, &pairs))
            .map_err(err)?;
        to_py(py, &rows)
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// `(1 - cos(student, teacher), d/d student)`.
#[pyfunction]
fn align_loss(student: Vec<f64>, teacher: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    losses::align_loss(&student, &teacher).map_err(err)
}

/// Mean KL between tempered teacher and student softmaxes over in-batch documents.
#[pyfunction]
#[pyo3(signature = (student, teacher, docs, tau_teacher = 0.07, tau_student = 0.05))]
fn rank_loss(
    student: Vec<Vec<f64>>,
    teacher: Vec<Vec<f64>>,
    docs: Vec<Vec<f64>>,
    tau_teacher: f64,
    tau_student: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (l, g) =
        losses::rank_loss(&matrix(&student)?, &matrix(&teacher)?, &matrix(&docs)?, tau_teacher, tau_student).map_err(err)?;
    Ok((l, matrix_rows(&g)))
}

#[pyfunction]
#[pyo3(signature = (student, docs, positives, tau_student = 0.05))]
fn infonce_loss(
    student: Vec<Vec<f64>>,
    docs: Vec<Vec<f64>>,
    positives: Vec<usize>,
    tau_student: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (l, g) = losses::infonce_loss(&matrix(&student)?, &matrix(&docs)?, &positives, tau_student).map_err(err)?;
    Ok((l, matrix_rows(&g)))
}

/// `run` maps query id to `[(doc_id, score), ...]`; `qrels` is a list of
/// `{"query_id", "doc_id", "grade"}` dicts.
#[pyfunction]
#[pyo3(signature = (run, qrels, k = eval::NDCG_CUTOFF))]
fn ndcg_at_k(
    py: Python<'_>,
    run: std::collections::BTreeMap<String, Vec<(String, f64)>>,
    qrels: &Bound<'_, PyAny>,
    k: usize,
) -> PyResult<Py<PyAny>> {
    let records = run
        .into_iter()
        .map(|(query_id, ranked)| RunRecord { query_id, ranked })
        .collect();
    let run = RetrievalRun::from_records(records).map_err(err)?;
    let qrels = Qrels::from_records(&from_py::<Vec<QrelRecord>>(qrels)?);
    to_py(py, &eval::ndcg_at_k(&run, &qrels, k).map_err(err)?)
}

/// Student score as a percentage of the teacher's; `None` when the teacher scores zero.
#[pyfunction]
fn retention_percent(teacher: f64, student: f64) -> Option<f64> {
    eval::retention_percent(teacher, student)
}

/// Which caches an objective needs and their size.
#[pyfunction]
#[pyo3(signature = (num_queries, num_docs, objective = "align", dim = 2048, dtype = "f16"))]
fn estimate_precache_cost(
    py: Python<'_>,
    num_queries: u64,
    num_docs: u64,
    objective: &str,
    dim: usize,
    dtype: &str,
) -> PyResult<Py<PyAny>> {
    let loss = match objective {
        "align" => LossConfig::align(),
        "rank" => LossConfig::rank(),
        "combined" => LossConfig::combined(1.0, 1.0),
        "infonce" => LossConfig::infonce(),
        other => return Err(PyValueError::new_err(format!("unknown objective {other:?}"))),
    };
    let model = CostModel {
        dim,
        dtype: parse_enum::<Dtype>(dtype, "dtype")?,
    };
    to_py(py, &precache_cost(num_queries, num_docs, &loss, model))
}

/// Index size in decimal gigabytes.
#[pyfunction]
#[pyo3(signature = (num_docs, dim, tokens_per_doc = 1, dtype_bytes = 4))]
fn index_storage_gb(num_docs: u64, dim: u64, tokens_per_doc: u64, dtype_bytes: u64) -> PyResult<f64> {
    let spec = StorageSpec {
        num_docs,
        dim,
        tokens_per_doc,
        dtype_bytes,
    };
    Ok(bytes_to_gb(index_storage_bytes(&spec).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (text, config = None))]
fn tokenize(text: &str, config: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<usize>> {
    let cfg: TokenizerConfig = from_py_or_default(config)?;
    tokenize_text(text, &cfg).map_err(err)
}

fn records(obj: &Bound<'_, PyAny>) -> PyResult<Vec<QueryRecord>> {
    from_py(obj)
}

/// Drops repeated texts (trimmed, case-folded); returns `(kept, removed)`.
#[pyfunction]
fn dedup(py: Python<'_>, recs: &Bound<'_, PyAny>) -> PyResult<(Py<PyAny>, usize)> {
    let out = augment::dedup(records(recs)?);
    Ok((to_py(py, &out.kept)?, out.removed))
}

/// Per (source, language) validation split; returns `(train, val)`.
#[pyfunction]
#[pyo3(signature = (recs, val_frac = 0.02, seed = 42))]
fn stratified_split(py: Python<'_>, recs: &Bound<'_, PyAny>, val_frac: f64, seed: u64) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let split = augment::stratified_split(&records(recs)?, val_frac, seed).map_err(err)?;
    Ok((to_py(py, &split.train)?, to_py(py, &split.val)?))
}

/// Translations needed per language to reach `target_per_language`.
#[pyfunction]
#[pyo3(signature = (recs, languages, target_per_language))]
fn merge_plan(py: Python<'_>, recs: &Bound<'_, PyAny>, languages: Vec<String>, target_per_language: usize) -> PyResult<Py<PyAny>> {
    let langs: Vec<&str> = languages.iter().map(String::as_str).collect();
    to_py(py, &augment::build_merge_plan(&records(recs)?, &langs, target_per_language))
}

pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("QdistillError", m.py().get_type::<QdistillError>())?;
    m.add("NDCG_CUTOFF", eval::NDCG_CUTOFF)?;
    m.add_class::<PyTeacherCache>()?;
    m.add_class::<PyStudentEncoder>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyFixture>()?;
    m.add_function(wrap_pyfunction!(align_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rank_loss, m)?)?;
    m.add_function(wrap_pyfunction!(infonce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(retention_percent, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_precache_cost, m)?)?;
    m.add_function(wrap_pyfunction!(index_storage_gb, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_split, m)?)?;
    m.add_function(wrap_pyfunction!(merge_plan, m)?)?;
    Ok(())
}

#[pymodule]
fn qdistill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

