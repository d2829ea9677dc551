use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crl_core::agent::{select_action, ActMode, Model};
use crl_core::diffcore::{Rng, Tensor};
use crl_core::encoder::EpisodeInput;
use crl_core::env::{Action, EnvConfig};
use crl_core::harness::{self, checkpoint, AgentKind, RunConfig};
use crl_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Usage(_) | Error::Config(_) | Error::Invalid(_) | Error::Dimension { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Builds a run config from defaults plus `key=value` overrides.
fn config_from(overrides: Option<Vec<(String, String)>>) -> PyResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(pairs) = overrides {
        c.apply_pairs(&pairs).map_err(to_py)?;
    }
    c.validate().map_err(to_py)?;
    Ok(c)
}

fn env_config(env: &str, variant: &str, stage: &str, split: &str) -> PyResult<EnvConfig> {
    let mut pairs = vec![("env.name".to_string(), env.to_string())];
    if env == "rtfm" {
        pairs.push(("env.variant".into(), variant.into()));
    } else {
        pairs.push(("env.stage".into(), stage.into()));
        pairs.push(("env.split".into(), split.into()));
    }
    Ok(config_from(Some(pairs))?.env_config())
}

/// One running episode of either game.
#[pyclass(name = "Env", module = "crl")]
struct PyEnv {
    inner: crl_core::env::Env,
    config: EnvConfig,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (env = "rtfm", seed = 0, variant = "base", stage = "s1", split = "train"))]
    fn new(env: &str, seed: u64, variant: &str, stage: &str, split: &str) -> PyResult<Self> {
        let config = env_config(env, variant, stage, split)?;
        let inner = config.make(seed).map_err(to_py)?;
        Ok(PyEnv { inner, config })
    }

    /// Starts a fresh episode with the same settings.
    fn reset(&mut self, seed: u64) -> PyResult<()> {
        self.inner = self.config.make(seed).map_err(to_py)?;
        Ok(())
    }

    /// Observation as a dict: `grid` (rows of cell word lists), `agent`,
    /// `inventory`, and `entities` as (id, name, position) triples.
    fn observe<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let o = self.inner.observe();
        let vocab = self.config.vocab();
        let d = PyDict::new(py);
        let rows: Vec<Vec<String>> = (0..o.height)
            .map(|r| {
                (0..o.width)
                    .map(|c| vocab.decode(&o.grid[r * o.width + c]))
                    .collect()
            })
            .collect();
        d.set_item("grid", rows)?;
        d.set_item("agent", (o.agent.row, o.agent.col))?;
        d.set_item("inventory", o.inventory)?;
        let entities: Vec<(usize, String, Option<(usize, usize)>)> = o
            .entities
            .iter()
            .map(|e| (e.id, vocab.decode(&e.words), e.pos.map(|p| (p.row, p.col))))
            .collect();
        d.set_item("entities", entities)?;
        Ok(d)
    }

    /// Applies action 0-4 (up, down, left, right, stay); returns
    /// `(reward, done, truncated)`.
    fn step(&mut self, action: usize) -> PyResult<(f64, bool, bool)> {
        let a = Action::from_index(action).map_err(to_py)?;
        let r = self.inner.step(a).map_err(to_py)?;
        Ok((r.reward, r.done, r.truncated))
    }

    fn manual(&self) -> Vec<String> {
        self.inner.manual().sentences(&self.config.vocab())
    }

    fn is_over(&self) -> bool {
        self.inner.is_over()
    }

    fn ground_truth_labels(&self) -> Vec<String> {
        self.inner.ground_truth_labels()
    }

    /// Shortest winning action sequence from the current state, if any.
    fn oracle_solve(&self) -> Option<Vec<usize>> {
        self.inner.oracle_solve().map(|p| p.iter().map(|a| a.index()).collect())
    }

    fn replay_text(&self) -> String {
        self.inner.replay_text()
    }

    fn __repr__(&self) -> String {
        format!("Env({}, seed={})", self.config.kind(), self.inner.seed())
    }
}

/// Encoder and policy loaded from a checkpoint.
#[pyclass(name = "Model", module = "crl")]
struct PyModel {
    inner: Model,
    rng: Rng,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel {
            inner: ck.model().map_err(to_py)?,
            rng: Rng::new(0),
        })
    }

    /// A freshly initialised model for the given env.
    #[staticmethod]
    #[pyo3(signature = (env = "rtfm", seed = 0, concepts = 2))]
    fn random(env: &str, seed: u64, concepts: usize) -> PyResult<Self> {
        let c = config_from(Some(vec![
            ("env.name".into(), env.into()),
            ("encoder.m".into(), concepts.to_string()),
        ]))?;
        let inner = Model::new(&c.env_config(), c.encoder, &mut Rng::new(seed)).map_err(to_py)?;
        Ok(PyModel {
            inner,
            rng: Rng::new(seed),
        })
    }

    #[getter]
    fn concept_width(&self) -> usize {
        self.inner.concept_width()
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|p| p.value.len()).sum()
    }

    /// Evaluation-mode concept vectors, one row per entity.
    fn concepts(&self, env: &PyEnv) -> PyResult<Vec<Vec<f64>>> {
        let c = self.episode_concepts(env)?;
        Ok((0..c.rows()).map(|r| c.row(r).to_vec()).collect())
    }

    /// `(action, log_prob, value)` for the env's current observation.
    #[pyo3(signature = (env, greedy = true))]
    fn act(&mut self, env: &PyEnv, greedy: bool) -> PyResult<(usize, f64, f64)> {
        let c = self.episode_concepts(env)?;
        let obs = env.inner.observe();
        let out = self.inner.evaluate_batch(&[(&c, &obs)]).map_err(to_py)?;
        let mode = if greedy { ActMode::Greedy } else { ActMode::Sample };
        let (a, lp) = select_action(out.logits.row(0), mode, &mut self.rng).map_err(to_py)?;
        Ok((a.index(), lp, out.values.data()[0]))
    }
}

impl PyModel {
    fn episode_concepts(&self, env: &PyEnv) -> PyResult<Tensor> {
        let input = EpisodeInput::from_observation(&env.inner.observe(), env.inner.manual());
        let mut all = self.inner.concepts(&[input], None).map_err(to_py)?;
        Ok(all.remove(0))
    }
}

/// Default configuration as `key=value` text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_text()
}

/// Trains with `overrides` applied to the defaults and returns the
/// summary as a dict.
#[pyfunction]
#[pyo3(signature = (overrides = None, init = None))]
fn train<'py>(
    py: Python<'py>,
    overrides: Option<Vec<(String, String)>>,
    init: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = config_from(overrides)?;
    let s = py
        .detach(|| harness::cmd_train(&c, init.as_deref()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("steps", s.steps)?;
    d.set_item("updates", s.updates)?;
    d.set_item("final_win_rate", s.final_win_rate)?;
    d.set_item("test_win_rate", s.test_win_rate)?;
    d.set_item("out", c.out)?;
    Ok(d)
}

/// Win rate with a 95% Wilson interval. `agent` is greedy, sample,
/// oracle or random; the first two need `checkpoint`.
#[pyfunction]
#[pyo3(signature = (agent = "random", checkpoint = None, env = "rtfm", variant = "base", stage = "s1", split = "train", episodes = 200, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    agent: &str,
    checkpoint: Option<PathBuf>,
    env: &str,
    variant: &str,
    stage: &str,
    split: &str,
    episodes: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: AgentKind = agent.parse().map_err(to_py)?;
    let model = checkpoint
        .map(|p| checkpoint::load(&p).and_then(|c| c.model()))
        .transpose()
        .map_err(to_py)?;
    let cfg = env_config(env, variant, stage, split)?;
    let o = py
        .detach(|| harness::cmd_eval(model.as_ref(), &cfg, kind, episodes, 0, seed))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("episodes", o.episodes)?;
    d.set_item("wins", o.wins)?;
    d.set_item("win_rate", o.win_rate)?;
    d.set_item("ci95", (o.ci_low, o.ci_high))?;
    d.set_item("mean_return", o.mean_return)?;
    Ok(d)
}

/// Finite-difference suite: `(name, max_rel_err, passed)` per check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> Vec<(String, f64, bool)> {
    py.detach(|| harness::cmd_gradcheck(seed, false))
        .into_iter()
        .map(|r| (r.name, r.max_rel_err, r.passed))
        .collect()
}

#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<String>) -> PyResult<f64> {
    harness::silhouette(&points, &labels).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (wins, n, z = 1.959963984540054))]
fn wilson_interval(wins: usize, n: usize, z: f64) -> (f64, f64) {
    harness::wilson_interval(wins, n, z)
}

#[pymodule]
fn crl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    Ok(())
}
