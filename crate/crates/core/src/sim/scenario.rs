//! Seeded scenario generation.

use super::geometry::{arc, convex_intersect, line, rect, Path, P2};
use crate::controller::VehicleState;
use crate::scene::Signal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub const LANE_WIDTH: f64 = 3.5;
pub const ROAD_SPEED: f64 = 8.0;
pub const TURN_SPEED: f64 = 6.0;
pub const AGENT_LENGTH: f64 = 4.5;
pub const AGENT_WIDTH: f64 = 2.0;
const STEP: f64 = 1.0;
const HALF: f64 = LANE_WIDTH / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    Curve,
    Intersection,
    MultiLane,
    BlockedLane,
    RedLight,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Straight,
        ScenarioKind::Curve,
        ScenarioKind::Intersection,
        ScenarioKind::MultiLane,
        ScenarioKind::BlockedLane,
        ScenarioKind::RedLight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Curve => "curve",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::MultiLane => "multi_lane",
            ScenarioKind::BlockedLane => "blocked_lane",
            ScenarioKind::RedLight => "red_light",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scenario kind '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lane {
    pub centerline: Path,
    pub width: f64,
    pub intersection: bool,
    pub successors: Vec<usize>,
    pub speed_limit: f64,
}

/// Rigid footprint translating at constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agent {
    /// Convex polygon at `t = 0`, world frame.
    pub footprint: Vec<P2>,
    pub velocity: P2,
    pub lane: Option<usize>,
}

impl Agent {
    pub fn footprint_at(&self, t: f64) -> Vec<P2> {
        let (dx, dy) = (self.velocity[0] * t, self.velocity[1] * t);
        self.footprint.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPhase {
    pub time: f64,
    pub state: Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub kind: ScenarioKind,
    pub lanes: Vec<Lane>,
    pub route_lanes: Vec<usize>,
    /// Concatenated centerlines of `route_lanes`.
    pub route: Path,
    /// Route arc length of the ego start.
    pub start_s: f64,
    /// Route arc length at which the episode is complete.
    pub goal_s: f64,
    pub agents: Vec<Agent>,
    pub signal_schedule: Vec<SignalPhase>,
    /// Convex region of the junction, if any.
    pub junction: Option<Vec<P2>>,
    /// Distance of the target point ahead of the ego along the route.
    pub target_ahead: f64,
}

impl ScenarioSpec {
    pub fn ego_start(&self) -> VehicleState {
        let (p, yaw) = self.route.sample(self.start_s);
        VehicleState { x: p[0], y: p[1], yaw, v: 0.0 }
    }

    pub fn signal_at(&self, t: f64) -> Signal {
        self.signal_schedule
            .iter()
            .take_while(|ph| ph.time <= t)
            .last()
            .map_or(Signal::None, |ph| ph.state)
    }

    pub fn route_length(&self) -> f64 {
        self.goal_s - self.start_s
    }
}

fn lane(pts: Vec<P2>, intersection: bool, successors: Vec<usize>, speed_limit: f64) -> Lane {
    Lane {
        centerline: Path::new(pts),
        width: LANE_WIDTH,
        intersection,
        successors,
        speed_limit,
    }
}

fn parked(center: P2, yaw: f64, lane: usize) -> Agent {
    Agent {
        footprint: rect(center, yaw, AGENT_LENGTH, AGENT_WIDTH),
        velocity: [0.0, 0.0],
        lane: Some(lane),
    }
}

fn moving(center: P2, speed_x: f64, lane: usize) -> Agent {
    Agent {
        footprint: rect(center, 0.0, AGENT_LENGTH, AGENT_WIDTH),
        velocity: [speed_x, 0.0],
        lane: Some(lane),
    }
}

/// Four-way junction centred at `(jx, 0)` with right-hand traffic. The
/// ego approaches from the west in lane 0; lanes 1-3 are its straight,
/// left and right connectors.
fn junction_network(jx: f64) -> (Vec<Lane>, Vec<P2>) {
    let h = 7.0;
    let far = 60.0;
    let lanes = vec![
        lane(line([-10.0, -HALF], [jx - h, -HALF], STEP), false, vec![1, 2, 3], ROAD_SPEED),
        lane(line([jx - h, -HALF], [jx + h, -HALF], STEP), true, vec![4], ROAD_SPEED),
        lane(arc([jx - h, -HALF], 0.0, h + HALF, PI / 2.0, STEP / 2.0), true, vec![5], TURN_SPEED),
        lane(arc([jx - h, -HALF], 0.0, h - HALF, -PI / 2.0, STEP / 2.0), true, vec![6], TURN_SPEED),
        lane(line([jx + h, -HALF], [jx + far, -HALF], STEP), false, vec![], ROAD_SPEED),
        lane(line([jx + HALF, h], [jx + HALF, far], STEP), false, vec![], ROAD_SPEED),
        lane(line([jx - HALF, -h], [jx - HALF, -far], STEP), false, vec![], ROAD_SPEED),
        lane(line([jx + far, HALF], [jx + h, HALF], STEP), false, vec![8], ROAD_SPEED),
        lane(line([jx + h, HALF], [jx - h, HALF], STEP), true, vec![9], ROAD_SPEED),
        lane(line([jx - h, HALF], [-10.0, HALF], STEP), false, vec![], ROAD_SPEED),
        lane(line([jx - HALF, far], [jx - HALF, h], STEP), false, vec![11], ROAD_SPEED),
        lane(line([jx - HALF, h], [jx - HALF, -h], STEP), true, vec![6], ROAD_SPEED),
        lane(line([jx + HALF, -far], [jx + HALF, -h], STEP), false, vec![13], ROAD_SPEED),
        lane(line([jx + HALF, -h], [jx + HALF, h], STEP), true, vec![5], ROAD_SPEED),
    ];
    (lanes, rect([jx, 0.0], 0.0, 2.0 * h, 2.0 * h))
}

fn route_of(lanes: &[Lane], ids: &[usize]) -> Path {
    let parts: Vec<&Path> = ids.iter().map(|&i| &lanes[i].centerline).collect();
    Path::concat(&parts)
}

/// Deterministic per `(seed, kind)`.
pub fn gen_scenario(seed: u64, kind: ScenarioKind) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ kind as u64);
    let mut agents = Vec::new();
    let mut junction = None;
    let mut schedule = vec![SignalPhase {
        time: 0.0,
        state: Signal::None,
    }];
    let start_s = 10.0;
    let (lanes, route_lanes, goal_s) = match kind {
        ScenarioKind::Straight | ScenarioKind::BlockedLane => {
            let mut len: f64 = rng.random_range(40.0..60.0);
            if kind == ScenarioKind::BlockedLane {
                // The goal lies past the obstacle.
                let x = rng.random_range(35.0..45.0);
                agents.push(parked([x, 0.0], 0.0, 0));
                len = 60.0;
            }
            let lanes = vec![lane(line([-10.0, 0.0], [len + 40.0, 0.0], STEP), false, vec![], ROAD_SPEED)];
            (lanes, vec![0], start_s + len)
        }
        ScenarioKind::Curve => {
            let radius: f64 = rng.random_range(30.0..40.0);
            let sweep = rng.random_range(60.0f64..75.0).to_radians();
            let angle = if rng.random_bool(0.5) { sweep } else { -sweep };
            let mut pts = line([-10.0, 0.0], [10.0, 0.0], STEP);
            let bend = arc([10.0, 0.0], 0.0, radius, angle, STEP);
            let end = *bend.last().unwrap();
            pts.extend(bend);
            let exit = [end[0] + 40.0 * angle.cos(), end[1] + 40.0 * angle.sin()];
            pts.extend(line(end, exit, STEP));
            let goal = 20.0 + radius * sweep + 10.0;
            (vec![lane(pts, false, vec![], ROAD_SPEED)], vec![0], goal)
        }
        ScenarioKind::Intersection | ScenarioKind::RedLight => {
            let jx: f64 = rng.random_range(30.0..40.0);
            let (lanes, region) = junction_network(jx);
            junction = Some(region);
            let route = if kind == ScenarioKind::RedLight {
                let red_for = rng.random_range(10.0..14.0);
                schedule = vec![
                    SignalPhase {
                        time: 0.0,
                        state: Signal::Red,
                    },
                    SignalPhase {
                        time: red_for,
                        state: Signal::Green,
                    },
                ];
                vec![0, 1, 4]
            } else {
                schedule[0].state = Signal::Green;
                if rng.random_bool(0.5) {
                    vec![0, 2, 5]
                } else {
                    vec![0, 3, 6]
                }
            };
            let through = lanes[route[0]].centerline.length() + lanes[route[1]].centerline.length();
            (lanes, route, through + 15.0)
        }
        ScenarioKind::MultiLane => {
            let len: f64 = rng.random_range(40.0..60.0);
            let end = len + 40.0;
            let lanes = vec![
                lane(line([-10.0, -HALF], [end, -HALF], STEP), false, vec![], ROAD_SPEED),
                lane(line([-10.0, -3.0 * HALF], [end, -3.0 * HALF], STEP), false, vec![], ROAD_SPEED),
                lane(line([end, HALF], [-10.0, HALF], STEP), false, vec![], ROAD_SPEED),
            ];
            agents.push(moving([rng.random_range(12.0..22.0), -3.0 * HALF], rng.random_range(5.0..7.0), 1));
            agents.push(moving([len + 20.0, HALF], -rng.random_range(6.0..8.0), 2));
            (lanes, vec![0], start_s + len)
        }
    };
    let route = route_of(&lanes, &route_lanes);
    ScenarioSpec {
        seed,
        kind,
        lanes,
        route_lanes,
        route,
        start_s,
        goal_s,
        agents,
        signal_schedule: schedule,
        junction,
        target_ahead: 20.0,
    }
}

/// True if any agent footprint at `t = 0` overlaps lane `id`'s area.
pub fn agent_blocks_lane(spec: &ScenarioSpec, id: usize) -> bool {
    let lane = &spec.lanes[id];
    let pts = lane.centerline.points();
    pts.windows(2).any(|w| {
        let (a, b) = (w[0], w[1]);
        let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
        let len = super::geometry::dist(a, b);
        let quad = rect([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0], yaw, len, lane.width);
        spec.agents.iter().any(|ag| convex_intersect(&quad, &ag.footprint))
    })
}
