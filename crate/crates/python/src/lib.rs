//! Python bindings: scenes, interpretation, control, matching, the network
//! pipeline and closed-loop episodes.

use lanecraft::checks::{check_fusion, check_grad, check_match};
use lanecraft::controller::{track as mpc_track, ControlError, MpcConfig, VehicleState};
use lanecraft::interpreter::{interpret as interpret_scene, Trajectory as CoreTrajectory};
use lanecraft::matching::hungarian as core_hungarian;
use lanecraft::perception::NetConfig;
use lanecraft::pipeline::{bench as core_bench, Ablation, Pipeline as CorePipeline};
use lanecraft::scene::{self, SceneAnnotation, TargetPoint};
use lanecraft::sim::episode::{run_with, EpisodeConfig, EpisodeResult as CoreResult, PerceptionMode};
use lanecraft::sim::scenario::{gen_scenario, ScenarioKind, ScenarioSpec};
use lanecraft::sim::world::{annotate, AnnotateOptions, WorldState};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Ego-frame double-edge scene.
#[pyclass(name = "Scene", module = "lanecraft_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Scene {
    inner: SceneAnnotation,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        scene::from_json(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        scene::to_json(&self.inner).map_err(value_err)
    }

    #[getter]
    fn lanes(&self) -> usize {
        self.inner.lanes.len()
    }

    #[getter]
    fn speed(&self) -> f64 {
        self.inner.speed
    }

    /// Rule violations as strings; empty when valid.
    fn validate(&self) -> Vec<String> {
        scene::validate(&self.inner).iter().map(|v| v.to_string()).collect()
    }

    fn interpret(&self) -> PyResult<Trajectory> {
        interpret_scene(&self.inner).map(Trajectory::from).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Scene(lanes={}, speed={}, signal={:?})", self.inner.lanes.len(), self.inner.speed, self.inner.signal)
    }
}

#[pyclass(name = "Trajectory", module = "lanecraft_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Trajectory {
    inner: CoreTrajectory,
}

impl From<CoreTrajectory> for Trajectory {
    fn from(inner: CoreTrajectory) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl Trajectory {
    #[new]
    #[pyo3(signature = (path, speed, stop=false))]
    fn new(path: Vec<(f64, f64)>, speed: f64, stop: bool) -> Self {
        Self {
            inner: CoreTrajectory {
                path: path.into_iter().map(|(x, y)| [x, y]).collect(),
                speed,
                stop,
            },
        }
    }

    #[getter]
    fn path(&self) -> Vec<(f64, f64)> {
        self.inner.path.iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn speed(&self) -> f64 {
        self.inner.speed
    }

    #[getter]
    fn stop(&self) -> bool {
        self.inner.stop
    }

    /// First MPC command `(steer, throttle, brake)` from ego state
    /// `(x, y, yaw, v)`; full brake when there is no path.
    #[pyo3(signature = (state, prev_steer=0.0))]
    fn track(&self, state: (f64, f64, f64, f64), prev_steer: f64) -> PyResult<(f64, f64, f64)> {
        let (x, y, yaw, v) = state;
        let s = VehicleState { x, y, yaw, v };
        match mpc_track(&self.inner, s, prev_steer, &MpcConfig::default()) {
            Ok(c) => Ok((c.steer, c.throttle, c.brake)),
            Err(ControlError::NoPath) => Ok((0.0, 0.0, 1.0)),
            Err(e) => Err(value_err(e)),
        }
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(points={}, speed={}, stop={})", self.inner.path.len(), self.inner.speed, self.inner.stop)
    }
}

/// Generated closed-loop scenario.
#[pyclass(name = "Scenario", module = "lanecraft_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Scenario {
    inner: ScenarioSpec,
}

#[pymethods]
impl Scenario {
    #[new]
    fn new(kind: &str, seed: u64) -> PyResult<Self> {
        let kind: ScenarioKind = kind.parse().map_err(value_err)?;
        Ok(Self {
            inner: gen_scenario(seed, kind),
        })
    }

    #[staticmethod]
    fn kinds() -> Vec<&'static str> {
        ScenarioKind::ALL.iter().map(|k| k.name()).collect()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Ground-truth scene and target point at the start pose.
    fn initial_scene(&self) -> (Scene, (f64, f64)) {
        let (inner, t) = annotate(&WorldState::initial(&self.inner), &self.inner, AnnotateOptions::default());
        (Scene { inner }, (t.x, t.y))
    }

    fn __repr__(&self) -> String {
        format!("Scenario(kind='{}', seed={})", self.inner.kind, self.inner.seed)
    }
}

#[pyclass(name = "EpisodeResult", module = "lanecraft_py")]
pub struct EpisodeResult {
    inner: CoreResult,
}

#[pymethods]
impl EpisodeResult {
    #[getter]
    fn rc(&self) -> f64 {
        self.inner.rc
    }

    #[getter]
    fn is_score(&self) -> f64 {
        self.inner.is_score
    }

    #[getter]
    fn ds(&self) -> f64 {
        self.inner.ds
    }

    #[getter]
    fn ticks(&self) -> usize {
        self.inner.ticks
    }

    #[getter]
    fn termination(&self) -> String {
        serde_json::to_value(self.inner.termination)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    /// `(t, kind)` pairs.
    #[getter]
    fn infractions(&self) -> Vec<(f64, String)> {
        self.inner
            .infractions
            .iter()
            .map(|i| (i.t, serde_json::to_value(i.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("EpisodeResult(rc={:.4}, is_score={:.4}, ds={:.4}, ticks={})", self.inner.rc, self.inner.is_score, self.inner.ds, self.inner.ticks)
    }
}

/// Perception network, early fusion and target planner.
#[pyclass(name = "Pipeline", module = "lanecraft_py")]
pub struct Pipeline {
    inner: CorePipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (reference=false, seed=0, tgp=true, hef=true, dlf=true))]
    fn new(reference: bool, seed: u64, tgp: bool, hef: bool, dlf: bool) -> PyResult<Self> {
        let cfg = if reference { NetConfig::reference() } else { NetConfig::small() };
        CorePipeline::new(cfg, seed, Ablation { tgp, hef, dlf })
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// Binary scene as perceived by the network.
    fn perceive(&self, scene: &Scene, target: (f64, f64)) -> PyResult<Scene> {
        let t = TargetPoint { x: target.0, y: target.1 };
        self.inner.perceive(&scene.inner, t, 0).map(|inner| Scene { inner }).map_err(value_err)
    }

    fn plan(&self, scene: &Scene, target: (f64, f64)) -> PyResult<Trajectory> {
        let t = TargetPoint { x: target.0, y: target.1 };
        self.inner.plan(&scene.inner, t, 0).map(Trajectory::from).map_err(value_err)
    }

    /// Latency report as a JSON string with `median_ms`, `p95_ms`, `fps`.
    #[pyo3(signature = (scene, target, ticks=20))]
    fn bench(&self, scene: &Scene, target: (f64, f64), ticks: usize) -> PyResult<String> {
        let t = TargetPoint { x: target.0, y: target.1 };
        let r = core_bench(&self.inner, &scene.inner, t, ticks).map_err(value_err)?;
        serde_json::to_string(&r).map_err(value_err)
    }
}

/// Runs one episode in oracle or network mode.
#[pyfunction]
#[pyo3(signature = (scenario, mode="oracle", tgp=true, hef=true, dlf=true, occ_noise=0.0, timeout=120.0))]
fn run_episode(
    py: Python<'_>,
    scenario: &Scenario,
    mode: &str,
    tgp: bool,
    hef: bool,
    dlf: bool,
    occ_noise: f64,
    timeout: f64,
) -> PyResult<EpisodeResult> {
    let mode: PerceptionMode = mode.parse().map_err(value_err)?;
    let cfg = EpisodeConfig {
        mode,
        ablation: Ablation { tgp, hef, dlf },
        occ_noise,
        timeout,
        ..EpisodeConfig::default()
    };
    let spec = scenario.inner.clone();
    let result = py.detach(move || -> Result<CoreResult, String> {
        cfg.validate().map_err(|e| e.to_string())?;
        let pipeline = match mode {
            PerceptionMode::Oracle => None,
            PerceptionMode::Network => Some(CorePipeline::new(cfg.net, cfg.net_seed, cfg.ablation).map_err(|e| e.to_string())?),
        };
        run_with(&spec, &cfg, pipeline.as_ref()).map(|e| e.result).map_err(|e| e.to_string())
    });
    result.map(|inner| EpisodeResult { inner }).map_err(value_err)
}

/// Minimum-cost assignment of rows to columns (`rows <= cols`).
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) || cost.len() > cols {
        return Err(PyValueError::new_err("cost must be rectangular with rows <= cols"));
    }
    Ok(core_hungarian(&cost))
}

/// Runs a verification suite (`grad`, `match` or `fusion`); returns
/// `(passed, report_json)`.
#[pyfunction]
fn check(what: &str) -> PyResult<(bool, String)> {
    let report = match what {
        "grad" => check_grad(20).map_err(value_err)?,
        "match" => check_match(100, 0),
        "fusion" => check_fusion(20, 50),
        other => return Err(PyValueError::new_err(format!("unknown check '{other}'"))),
    };
    Ok((report.passed, serde_json::to_string(&report).map_err(value_err)?))
}

#[pymodule]
pub fn lanecraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<EpisodeResult>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
