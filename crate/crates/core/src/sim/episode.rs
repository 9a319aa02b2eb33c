//! Closed-loop episodes: planning at 2 Hz, control at 10 Hz, infractions
//! and route-completion metrics.

use super::geometry::{convex_intersect, rect, to_local, to_world, Path, P2};
use super::scenario::{ScenarioKind, ScenarioSpec, AGENT_LENGTH, AGENT_WIDTH};
use super::world::{annotate, step, AnnotateOptions, WorldState};
use crate::controller::{track, wrap_angle, ControlCommand, ControlError, MpcConfig, VehicleState};
use crate::interpreter::{interpret, InterpretError, Trajectory};
use crate::perception::NetConfig;
use crate::pipeline::{Ablation, Pipeline, PipelineError};
use crate::scene::{SceneAnnotation, Signal};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

/// Route samples closer than this to the ego trace count as completed.
pub const RC_RADIUS: f64 = 3.0;
pub const RC_SPACING: f64 = 0.5;
/// Leaving the route by more than this ends the episode.
pub const DEVIATION_LIMIT: f64 = 5.0;
/// Below this speed a reversed heading is not counted.
const WRONG_WAY_MIN_SPEED: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionMode {
    Oracle,
    Network,
}

impl fmt::Display for PerceptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerceptionMode::Oracle => "oracle",
            PerceptionMode::Network => "network",
        })
    }
}

impl FromStr for PerceptionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(PerceptionMode::Oracle),
            "network" => Ok(PerceptionMode::Network),
            _ => Err(format!("unknown perception mode '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    Collision,
    WrongDirection,
    RedLight,
    RouteDeviation,
}

impl InfractionKind {
    pub fn penalty(self) -> f64 {
        match self {
            InfractionKind::Collision => 0.5,
            InfractionKind::RedLight | InfractionKind::WrongDirection => 0.7,
            InfractionKind::RouteDeviation => 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub t: f64,
    pub kind: InfractionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Collision,
    RouteDeviation,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub mode: PerceptionMode,
    pub ablation: Ablation,
    /// Fraction of perceived occupancy bits flipped at each planning tick.
    pub occ_noise: f64,
    pub noise_seed: u64,
    pub mpc: MpcConfig,
    pub net: NetConfig,
    pub net_seed: u64,
    pub timeout: f64,
    /// Control ticks per planning tick.
    pub plan_every: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            mode: PerceptionMode::Oracle,
            ablation: Ablation::FULL,
            occ_noise: 0.0,
            noise_seed: 0,
            mpc: MpcConfig::default(),
            net: NetConfig::small(),
            net_seed: 0,
            timeout: 120.0,
            plan_every: 5,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        self.mpc.validate().map_err(|e| EpisodeError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.occ_noise) {
            return Err(EpisodeError::Config(format!("occ_noise {} outside [0, 1]", self.occ_noise)));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(EpisodeError::Config(format!("timeout {} must be positive", self.timeout)));
        }
        if self.plan_every == 0 {
            return Err(EpisodeError::Config("plan_every must be at least 1".into()));
        }
        if self.mode == PerceptionMode::Network {
            self.net.validate().map_err(|e| EpisodeError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub rc: f64,
    pub infractions: Vec<Infraction>,
    pub is_score: f64,
    pub ds: f64,
    pub ticks: usize,
    pub termination: Termination,
    pub wall_ms_per_tick: Vec<f64>,
}

impl EpisodeResult {
    /// Equality ignoring wall-clock timing.
    pub fn same_outcome(&self, other: &EpisodeResult) -> bool {
        let strip = |r: &EpisodeResult| EpisodeResult {
            wall_ms_per_tick: Vec::new(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// One control tick of the episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub ego: VehicleState,
    pub command: ControlCommand,
    pub stop: bool,
    pub infractions: Vec<InfractionKind>,
}

pub fn write_trace(records: &[TraceRecord], mut out: impl Write) -> Result<(), EpisodeError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Product of per-infraction penalties.
pub fn infraction_score(infractions: &[Infraction]) -> f64 {
    infractions.iter().map(|i| i.kind.penalty()).product()
}

/// Fraction of route samples in `[start_s, goal_s]` within [`RC_RADIUS`]
/// of the driven trace.
pub fn route_completion(spec: &ScenarioSpec, trace: &[P2]) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let driven = Path::new(trace.to_vec());
    let n = ((spec.route_length() / RC_SPACING).floor() as usize).max(1);
    let hit = (0..=n)
        .filter(|&k| {
            let s = spec.start_s + spec.route_length() * k as f64 / n as f64;
            driven.project(spec.route.sample(s).0).dist <= RC_RADIUS
        })
        .count();
    hit as f64 / (n + 1) as f64
}

/// Flips a uniformly chosen `round(p * n)` of the scene's `n` occupancy
/// bits.
pub fn perturb_occupancy(scene: &mut SceneAnnotation, p: f64, rng: &mut impl Rng) {
    let n: usize = scene.lanes.iter().map(|l| l.left.len() + l.right.len()).sum();
    let k = (p * n as f64).round() as usize;
    if k == 0 {
        return;
    }
    let mut chosen = vec![false; n];
    sample(rng, n, k).into_iter().for_each(|i| chosen[i] = true);
    let mut bits = chosen.into_iter();
    for lane in &mut scene.lanes {
        for pt in lane.points_mut() {
            if bits.next() == Some(true) {
                pt.occ ^= 1;
            }
        }
    }
}

pub fn ego_footprint(ego: &VehicleState) -> Vec<P2> {
    rect([ego.x, ego.y], ego.yaw, AGENT_LENGTH, AGENT_WIDTH)
}

fn inside(poly: &[P2], p: P2) -> bool {
    convex_intersect(&[p], poly)
}

/// True when every lane containing the ego runs against its heading.
fn wrong_way(spec: &ScenarioSpec, ego: &VehicleState) -> bool {
    if ego.v < WRONG_WAY_MIN_SPEED {
        return false;
    }
    let p = [ego.x, ego.y];
    let mut containing = spec
        .lanes
        .iter()
        .map(|l| l.centerline.project(p).heading)
        .zip(spec.lanes.iter().map(|l| l.centerline.project(p).dist <= l.width / 2.0))
        .filter(|(_, within)| *within)
        .peekable();
    containing.peek().is_some() && containing.all(|(h, _)| wrap_angle(h - ego.yaw).abs() > FRAC_PI_2)
}

struct Monitor {
    in_junction: bool,
    wrong_way: bool,
}

impl Monitor {
    /// New infractions at this state, and whether the episode must end.
    fn check(&mut self, spec: &ScenarioSpec, world: &WorldState) -> (Vec<InfractionKind>, Option<Termination>) {
        let ego = &world.ego;
        let mut found = Vec::new();
        let mut end = None;
        let body = ego_footprint(ego);
        if world.agents.iter().any(|a| convex_intersect(&body, a)) {
            found.push(InfractionKind::Collision);
            end = Some(Termination::Collision);
        }
        if let Some(j) = &spec.junction {
            let now = inside(j, [ego.x, ego.y]);
            if now && !self.in_junction && world.signal == Signal::Red {
                found.push(InfractionKind::RedLight);
            }
            self.in_junction = now;
        }
        let wrong = wrong_way(spec, ego);
        if wrong && !self.wrong_way {
            found.push(InfractionKind::WrongDirection);
        }
        self.wrong_way = wrong;
        if end.is_none() && spec.route.project([ego.x, ego.y]).dist > DEVIATION_LIMIT {
            found.push(InfractionKind::RouteDeviation);
            end = Some(Termination::RouteDeviation);
        }
        (found, end)
    }
}

/// Trajectory with its path held in the world frame between planning ticks.
struct HeldPlan {
    path: Vec<P2>,
    speed: f64,
    stop: bool,
}

impl HeldPlan {
    fn from_local(traj: Trajectory, ego: &VehicleState) -> Self {
        Self {
            path: traj.path.iter().map(|&p| to_world([ego.x, ego.y], ego.yaw, p)).collect(),
            speed: traj.speed,
            stop: traj.stop,
        }
    }

    fn to_local(&self, ego: &VehicleState) -> Trajectory {
        Trajectory {
            path: self.path.iter().map(|&p| to_local([ego.x, ego.y], ego.yaw, p)).collect(),
            speed: self.speed,
            stop: self.stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub result: EpisodeResult,
    pub trace: Vec<TraceRecord>,
}

/// Runs one episode, building the network in network mode.
pub fn run_episode(spec: &ScenarioSpec, cfg: &EpisodeConfig) -> Result<Episode, EpisodeError> {
    cfg.validate()?;
    match cfg.mode {
        PerceptionMode::Oracle => run_with(spec, cfg, None),
        PerceptionMode::Network => {
            let pipeline = Pipeline::new(cfg.net, cfg.net_seed, cfg.ablation)?;
            run_with(spec, cfg, Some(&pipeline))
        }
    }
}

/// Runs one episode; `pipeline` is required in network mode and its
/// ablation switches are replaced by the config's.
pub fn run_with(spec: &ScenarioSpec, cfg: &EpisodeConfig, pipeline: Option<&Pipeline>) -> Result<Episode, EpisodeError> {
    cfg.validate()?;
    let pipeline = match (cfg.mode, pipeline) {
        (PerceptionMode::Oracle, _) => None,
        (PerceptionMode::Network, Some(p)) => {
            let mut p = p.clone();
            p.ablation = cfg.ablation;
            Some(p)
        }
        (PerceptionMode::Network, None) => {
            return Err(EpisodeError::Config("network mode needs a pipeline".into()));
        }
    };
    let dt = cfg.mpc.dt;
    let max_ticks = (cfg.timeout / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.rotate_left(17) ^ cfg.noise_seed ^ spec.kind as u64);
    let opts = AnnotateOptions {
        target_guided: cfg.ablation.tgp,
    };
    let mut world = WorldState::initial(spec);
    let mut monitor = Monitor {
        in_junction: false,
        wrong_way: false,
    };
    let mut plan: Option<HeldPlan> = None;
    let mut prev_steer = 0.0;
    let mut driven = vec![[world.ego.x, world.ego.y]];
    let mut infractions = Vec::new();
    let mut trace = Vec::new();
    let mut wall = Vec::new();
    let mut termination = Termination::Timeout;
    for tick in 0..max_ticks {
        let t0 = Instant::now();
        if tick % cfg.plan_every == 0 {
            let (mut observed, target) = annotate(&world, spec, opts);
            perturb_occupancy(&mut observed, cfg.occ_noise, &mut rng);
            let traj = match &pipeline {
                None => cfg.ablation.apply(interpret(&observed)?),
                Some(p) => p.plan(&observed, target, tick as u64)?,
            };
            plan = Some(HeldPlan::from_local(traj, &world.ego));
        }
        let held = plan.as_ref().expect("planned on first tick");
        let local = held.to_local(&world.ego);
        let ego_frame = VehicleState {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
            v: world.ego.v,
        };
        let command = match track(&local, ego_frame, prev_steer, &cfg.mpc) {
            Ok(c) => c,
            Err(ControlError::NoPath) => ControlCommand::FULL_BRAKE,
            Err(e) => return Err(EpisodeError::Config(e.to_string())),
        };
        wall.push(t0.elapsed().as_secs_f64() * 1e3);
        prev_steer = command.steer;
        world = step(&world, spec, command, dt);
        driven.push([world.ego.x, world.ego.y]);
        let (found, end) = monitor.check(spec, &world);
        infractions.extend(found.iter().map(|&kind| Infraction { t: world.t, kind }));
        trace.push(TraceRecord {
            t: world.t,
            ego: world.ego,
            command,
            stop: held.stop,
            infractions: found,
        });
        if let Some(end) = end {
            termination = end;
            break;
        }
        if spec.route.project([world.ego.x, world.ego.y]).s >= spec.goal_s {
            termination = Termination::Completed;
            break;
        }
    }
    let rc = route_completion(spec, &driven);
    let is_score = infraction_score(&infractions);
    Ok(Episode {
        result: EpisodeResult {
            kind: spec.kind,
            seed: spec.seed,
            rc,
            infractions,
            is_score,
            ds: rc * is_score,
            ticks: trace.len(),
            termination,
            wall_ms_per_tick: wall,
        },
        trace,
    })
}
