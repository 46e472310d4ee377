//! Python bindings: databases, retrieval, rewards, training, evaluation and
//! steering sessions.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use racon_core::checkpoint::Checkpoint;
use racon_core::eval::{evaluate_system, EvalConfig};
use racon_core::motion::{generate_synthetic_clips, Goal};
use racon_core::retrieval::{build_database, knn_search, load_database, save_database, Query, RetrievalDatabase, RetrievalEnv};
use racon_core::rewards::{goal_reward as core_goal_reward, prior_reward as core_prior_reward, GoalObservation, RewardWeights};
use racon_core::trainer::{TrainConfig, Trainer as CoreTrainer};
use racon_service::{ClientMessage, ServiceError, Session as CoreSession, Shared};

fn core_err(e: racon_core::Error) -> PyErr {
    use racon_core::Error as E;
    match e {
        E::Io { .. } | E::IoBare(_) | E::Format(_) => PyIOError::new_err(e.to_string()),
        E::UnknownDatabase { .. } => PyKeyError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn service_err(e: ServiceError) -> PyErr {
    match e {
        ServiceError::Core(c) => core_err(c),
        ServiceError::Io(_) => PyIOError::new_err(e.to_string()),
        ServiceError::UnknownDatabase { .. } | ServiceError::UnknownSession(_) => PyKeyError::new_err(e.to_string()),
        ServiceError::Invalid(_) => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A retrieval database of motion clips.
#[pyclass(module = "racon", frozen, from_py_object)]
#[derive(Clone)]
struct Database {
    inner: Arc<RetrievalDatabase>,
}

#[pymethods]
impl Database {
    /// Builds a database from generated clips of one style.
    #[staticmethod]
    #[pyo3(signature = (style, count, seed=0, name=None))]
    fn synthetic(style: &str, count: usize, seed: u64, name: Option<&str>) -> PyResult<Self> {
        let clips = generate_synthetic_clips(style, count, seed).map_err(core_err)?;
        let db = build_database(clips, name.unwrap_or(style)).map_err(core_err)?;
        Ok(Self { inner: Arc::new(db) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(load_database(path).map_err(core_err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_database(&self.inner, path).map_err(core_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn clip_ids(&self) -> Vec<u64> {
        self.inner.clips().iter().map(|c| c.clip_id).collect()
    }

    /// Normalized key of row `i`.
    fn key(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("row {i} out of range ({})", self.inner.len())));
        }
        Ok(self.inner.key_row(i).to_vec())
    }

    /// Exact k nearest rows to a normalized query, as `(row, clip_id, distance)`.
    #[pyo3(signature = (values, k=1, weights=None))]
    fn knn(&self, values: Vec<f64>, k: usize, weights: Option<Vec<f64>>) -> PyResult<Vec<(usize, u64, f64)>> {
        let query = match weights {
            Some(w) => {
                if w.len() != values.len() {
                    return Err(PyValueError::new_err("weights and values differ in length"));
                }
                Query {
                    values: values.iter().zip(&w).map(|(v, w)| v * w).collect(),
                    weights: w,
                }
            }
            None => Query::unweighted(values),
        };
        let hits = knn_search(&self.inner, &query, k).map_err(core_err)?;
        Ok(hits.into_iter().map(|n| (n.index, n.clip_id, n.distance)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Database(name={:?}, clips={})", self.inner.name(), self.inner.len())
    }
}

fn make_env(dbs: &[Database], period: usize) -> PyResult<RetrievalEnv> {
    RetrievalEnv::new(dbs.iter().map(|d| Arc::clone(&d.inner)), period).map_err(core_err)
}

/// Goal reward `exp(-d)` for a planar velocity and heading.
#[pyfunction]
#[pyo3(signature = (goal_vx, goal_vy, vx, vy, yaw, facing=None))]
fn goal_reward(goal_vx: f64, goal_vy: f64, vx: f64, vy: f64, yaw: f64, facing: Option<f64>) -> f64 {
    let goal = Goal::new(goal_vx, goal_vy, facing);
    let obs = GoalObservation {
        velocity: racon_core::nalgebra::Vector2::new(vx, vy),
        yaw,
    };
    core_goal_reward(&goal, &obs, &RewardWeights::default())
}

/// Prior reward `-alpha * ln(max(1 - d, eps))`.
#[pyfunction]
#[pyo3(signature = (d, alpha=None, epsilon=None))]
fn prior_reward(d: f64, alpha: Option<f64>, epsilon: Option<f64>) -> f64 {
    let w = RewardWeights::default();
    core_prior_reward(d, alpha.unwrap_or(w.alpha), epsilon.unwrap_or(w.epsilon))
}

/// Default training configuration as TOML; `toy=True` gives the small preset.
#[pyfunction]
#[pyo3(signature = (toy=false))]
fn default_config(toy: bool) -> String {
    if toy {
        TrainConfig::toy().to_toml()
    } else {
        TrainConfig::default().to_toml()
    }
}

/// Iterative trainer over a set of databases.
#[pyclass(module = "racon")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (databases, config=None))]
    fn new(databases: Vec<Database>, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => TrainConfig::from_toml(text).map_err(core_err)?,
            None => TrainConfig::toy(),
        };
        let env = make_env(&databases, cfg.period)?;
        Ok(Self {
            inner: CoreTrainer::new(cfg, env).map_err(core_err)?,
        })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration
    }

    /// Runs one iteration and returns its metrics.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (m, _) = self.inner.step().map_err(core_err)?;
        to_py(py, &m)
    }

    #[pyo3(signature = (path, with_buffers=false))]
    fn save_checkpoint(&self, path: PathBuf, with_buffers: bool) -> PyResult<()> {
        self.inner.checkpoint(with_buffers).save(path).map_err(core_err)
    }
}

/// Evaluates a checkpoint; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, databases, episodes=20, max_len=300, seed=0, fid_samples=2000, mmodality_goals=4, mmodality_runs=3))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    databases: Vec<Database>,
    episodes: usize,
    max_len: usize,
    seed: u64,
    fid_samples: usize,
    mmodality_goals: usize,
    mmodality_runs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let ckpt = Checkpoint::load(checkpoint).map_err(core_err)?;
    let env = make_env(&databases, ckpt.config.period)?;
    ckpt.check_compatible(&env).map_err(core_err)?;
    let eval = EvalConfig {
        episodes,
        max_len,
        seed,
        mmodality_goals,
        mmodality_runs,
        fid_samples,
    };
    let names: Vec<String> = env.names().map(str::to_string).collect();
    let (report, _) = evaluate_system(&ckpt.agent, &env, &ckpt.config, &eval, &names).map_err(core_err)?;
    to_py(py, &report)
}

/// A steering session ticked from Python; each tick returns a frame dict.
#[pyclass(module = "racon")]
struct Session {
    inner: CoreSession,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (checkpoint, databases, db=None, seed=0))]
    fn new(checkpoint: PathBuf, databases: Vec<Database>, db: Option<String>, seed: u64) -> PyResult<Self> {
        let ckpt = Checkpoint::load(checkpoint).map_err(core_err)?;
        let env = make_env(&databases, ckpt.config.period)?;
        let shared = Arc::new(Shared::new(ckpt, env).map_err(service_err)?);
        let db = db.unwrap_or_else(|| shared.database_names().remove(0));
        Ok(Self {
            inner: CoreSession::new(0, shared, &db, seed).map_err(service_err)?,
        })
    }

    #[pyo3(signature = (vx, vy, facing=None))]
    fn set_goal(&mut self, vx: f64, vy: f64, facing: Option<f64>) -> PyResult<()> {
        self.inner.apply(&ClientMessage::SetGoal { vx, vy, facing }).map_err(service_err)
    }

    fn switch_db(&mut self, name: String) -> PyResult<()> {
        self.inner.apply(&ClientMessage::SwitchDb { name }).map_err(service_err)
    }

    fn reset(&mut self) -> PyResult<()> {
        self.inner.apply(&ClientMessage::Reset).map_err(service_err)
    }

    #[getter]
    fn active_db(&self) -> String {
        self.inner.active_db().to_string()
    }

    fn tick<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let f = self.inner.tick().map_err(service_err)?;
        to_py(py, &f)
    }
}

#[pymodule]
fn racon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Database>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(goal_reward, m)?)?;
    m.add_function(wrap_pyfunction!(prior_reward, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("V_MAX", racon_service::DEFAULT_V_MAX)?;
    Ok(())
}
