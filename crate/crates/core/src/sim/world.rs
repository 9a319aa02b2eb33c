//! World state, stepping, and ground-truth double-edge annotation.

use super::geometry::{convex_intersect, dist, to_local, Path, P2};
use super::scenario::ScenarioSpec;
use crate::controller::{bicycle_step, wrap_angle, ControlCommand, VehicleState};
use crate::scene::{DoubleEdge, Edge, EdgePoint, SceneAnnotation, Signal, TargetPoint, BEV_RANGE, MAX_LANES, POINTS_PER_EDGE};
use serde::Serialize;
use std::f64::consts::FRAC_PI_2;

pub const WHEELBASE: f64 = 2.8;
/// Corridor extent along the chain, relative to the ego.
pub const PLAN_BEHIND: f64 = 1.0;
pub const PLAN_AHEAD: f64 = 20.0;
/// Beyond this distance from its corridor the ego counts as off-lane.
pub const OFF_LANE: f64 = 3.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldState {
    pub t: f64,
    pub ego: VehicleState,
    /// Agent footprints at `t`.
    pub agents: Vec<Vec<P2>>,
    pub signal: Signal,
}

impl WorldState {
    pub fn initial(spec: &ScenarioSpec) -> Self {
        Self {
            t: 0.0,
            ego: spec.ego_start(),
            agents: agent_footprints(spec, 0.0),
            signal: spec.signal_at(0.0),
        }
    }
}

/// Ego through the bicycle model; agents and signal are functions of time.
pub fn step(world: &WorldState, spec: &ScenarioSpec, command: ControlCommand, dt: f64) -> WorldState {
    let t = world.t + dt;
    WorldState {
        t,
        ego: bicycle_step(world.ego, command, dt, WHEELBASE),
        agents: agent_footprints(spec, t),
        signal: spec.signal_at(t),
    }
}

pub fn agent_footprints(spec: &ScenarioSpec, t: f64) -> Vec<Vec<P2>> {
    spec.agents.iter().map(|a| a.footprint_at(t)).collect()
}

/// Lane sequence the plan corridor follows, with the ego's arc length on it.
#[derive(Debug, Clone)]
pub struct Corridor {
    pub lanes: Vec<usize>,
    /// Arc length at which each lane starts along the chain.
    pub offsets: Vec<f64>,
    pub path: Path,
    pub ego_s: f64,
}

fn chain(spec: &ScenarioSpec, lanes: Vec<usize>, ego: P2) -> Option<Corridor> {
    let mut offsets = Vec::with_capacity(lanes.len());
    let mut acc = 0.0;
    for &l in &lanes {
        offsets.push(acc);
        acc += spec.lanes[l].centerline.length();
    }
    let parts: Vec<&Path> = lanes.iter().map(|&l| &spec.lanes[l].centerline).collect();
    let path = Path::concat(&parts);
    let proj = path.project(ego);
    (proj.dist <= OFF_LANE).then_some(Corridor {
        lanes,
        offsets,
        path,
        ego_s: proj.s,
    })
}

/// The lane whose centreline is nearest the ego among those roughly
/// aligned with its heading.
pub fn current_lane(spec: &ScenarioSpec, ego: &VehicleState) -> Option<usize> {
    let p = [ego.x, ego.y];
    spec.lanes
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let pr = l.centerline.project(p);
            let aligned = wrap_angle(pr.heading - ego.yaw).abs() < FRAC_PI_2;
            (aligned && pr.dist <= l.width / 2.0).then_some((i, pr.dist))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

fn end_heading(path: &Path) -> f64 {
    path.sample(path.length()).1
}

/// Route lanes when target guidance is on; otherwise the straightest
/// successor chain from the lane the ego occupies.
pub fn corridor(spec: &ScenarioSpec, ego: &VehicleState, target_guided: bool) -> Option<Corridor> {
    let p = [ego.x, ego.y];
    if target_guided {
        return chain(spec, spec.route_lanes.clone(), p);
    }
    let mut lanes = vec![current_lane(spec, ego)?];
    let mut ahead = 0.0;
    while ahead < 2.0 * PLAN_AHEAD + 40.0 {
        let last = *lanes.last().unwrap();
        let heading = end_heading(&spec.lanes[last].centerline);
        let next = spec.lanes[last].successors.iter().copied().min_by(|&a, &b| {
            let da = wrap_angle(end_heading(&spec.lanes[a].centerline) - heading).abs();
            let db = wrap_angle(end_heading(&spec.lanes[b].centerline) - heading).abs();
            da.total_cmp(&db)
        });
        match next {
            Some(n) if !lanes.contains(&n) => {
                ahead += spec.lanes[n].centerline.length();
                lanes.push(n);
            }
            _ => break,
        }
    }
    chain(spec, lanes, p)
}

/// Centreline samples stay this far inside the BEV square so that both
/// edges do too.
fn crop_limit(width: f64) -> f64 {
    BEV_RANGE - width / 2.0 - 0.25
}

struct Run {
    lane: usize,
    s0: f64,
    s1: f64,
    nearest: f64,
}

fn runs_in_view(spec: &ScenarioSpec, ego: &VehicleState) -> Vec<Run> {
    let origin = [ego.x, ego.y];
    let mut runs = Vec::new();
    for (li, lane) in spec.lanes.iter().enumerate() {
        let limit = crop_limit(lane.width);
        let pts = lane.centerline.points();
        let path = &lane.centerline;
        let mut start: Option<usize> = None;
        let mut cum = 0.0;
        let mut cums = Vec::with_capacity(pts.len());
        for i in 0..pts.len() {
            if i > 0 {
                cum += dist(pts[i - 1], pts[i]);
            }
            cums.push(cum);
        }
        let close = |a: usize, b: usize, runs: &mut Vec<Run>| {
            if cums[b] - cums[a] >= 1.0 {
                let nearest = (a..=b).map(|k| dist(pts[k], origin)).fold(f64::INFINITY, f64::min);
                runs.push(Run {
                    lane: li,
                    s0: cums[a],
                    s1: cums[b],
                    nearest,
                });
            }
        };
        for (i, &p) in pts.iter().enumerate() {
            let l = to_local(origin, ego.yaw, p);
            let inside = l[0].abs() <= limit && l[1].abs() <= limit;
            match (inside, start) {
                (true, None) => start = Some(i),
                (false, Some(a)) => {
                    close(a, i - 1, &mut runs);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            close(a, pts.len() - 1, &mut runs);
        }
        debug_assert!((path.length() - cum).abs() < 1e-6);
    }
    if runs.len() > MAX_LANES {
        let mut order: Vec<usize> = (0..runs.len()).collect();
        order.sort_by(|&a, &b| runs[a].nearest.total_cmp(&runs[b].nearest));
        let mut keep = vec![false; runs.len()];
        order.iter().take(MAX_LANES).for_each(|&i| keep[i] = true);
        let mut k = 0;
        runs.retain(|_| {
            k += 1;
            keep[k - 1]
        });
    }
    runs
}

fn edge_offsets(path: &Path, s: f64, half_width: f64) -> (P2, P2) {
    let (c, h) = path.sample(s);
    let (sn, cs) = h.sin_cos();
    let n = [-sn, cs];
    (
        [c[0] + n[0] * half_width, c[1] + n[1] * half_width],
        [c[0] - n[0] * half_width, c[1] - n[1] * half_width],
    )
}

/// True if any agent overlaps the lane between arc lengths `a` and `b`.
fn cell_occupied(path: &Path, half_width: f64, a: f64, b: f64, agents: &[Vec<P2>]) -> bool {
    if agents.is_empty() || b <= a {
        return false;
    }
    let pieces = ((b - a) / 1.0).ceil().max(1.0) as usize;
    (0..pieces).any(|k| {
        let sa = a + (b - a) * k as f64 / pieces as f64;
        let sb = a + (b - a) * (k + 1) as f64 / pieces as f64;
        let (la, ra) = edge_offsets(path, sa, half_width);
        let (lb, rb) = edge_offsets(path, sb, half_width);
        let quad = [ra, rb, lb, la];
        agents.iter().any(|ag| convex_intersect(&quad, ag))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotateOptions {
    pub target_guided: bool,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self { target_guided: true }
    }
}

/// Privileged perception: ego-frame double-edges for every lane run in the
/// BEV window, each resampled to [`POINTS_PER_EDGE`] pairs.
pub fn annotate(world: &WorldState, spec: &ScenarioSpec, opts: AnnotateOptions) -> (SceneAnnotation, TargetPoint) {
    let ego = &world.ego;
    let origin = [ego.x, ego.y];
    let agents = &world.agents;
    let corridor = corridor(spec, ego, opts.target_guided);
    let n = POINTS_PER_EDGE;
    let mut lanes = Vec::new();
    for run in runs_in_view(spec, ego) {
        let lane = &spec.lanes[run.lane];
        let path = &lane.centerline;
        let half = lane.width / 2.0;
        let spacing = (run.s1 - run.s0) / (n - 1) as f64;
        let mid = (run.s0 + run.s1) / 2.0;
        let (mid_pt, mid_heading) = path.sample(mid);
        let route_heading = spec.route.project(mid_pt).heading;
        let direction = u8::from(wrap_angle(mid_heading - route_heading).abs() < FRAC_PI_2);
        let chain_offset = corridor
            .as_ref()
            .and_then(|c| c.lanes.iter().position(|&l| l == run.lane).map(|i| (c.offsets[i], c.ego_s)));
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        for j in 0..n {
            let s = run.s0 + spacing * j as f64;
            let (l, r) = edge_offsets(path, s, half);
            let lo = (s - spacing / 2.0).max(run.s0);
            let hi = (s + spacing / 2.0).min(run.s1);
            let occ = u8::from(!cell_occupied(path, half, lo, hi, agents));
            let plan = match chain_offset {
                Some((off, ego_s)) => {
                    let cs = off + s;
                    u8::from(cs >= ego_s - PLAN_BEHIND && cs <= ego_s + PLAN_AHEAD)
                }
                None => 0,
            };
            let l = to_local(origin, ego.yaw, l);
            let r = to_local(origin, ego.yaw, r);
            left.push(EdgePoint::new(l[0], l[1], occ, plan));
            right.push(EdgePoint::new(r[0], r[1], occ, plan));
        }
        lanes.push(DoubleEdge {
            left: Edge::new(left),
            right: Edge::new(right),
            intersection: u8::from(lane.intersection),
            direction,
        });
    }
    let speed = corridor
        .as_ref()
        .map(|c| {
            let idx = c.offsets.partition_point(|&o| o <= c.ego_s).saturating_sub(1);
            spec.lanes[c.lanes[idx]].speed_limit
        })
        .unwrap_or(0.0);
    let route_s = spec.route.project(origin).s;
    let (tp, _) = spec.route.sample(route_s + spec.target_ahead);
    let tl = to_local(origin, ego.yaw, tp);
    let target = TargetPoint {
        x: tl[0].clamp(-BEV_RANGE, BEV_RANGE),
        y: tl[1].clamp(-BEV_RANGE, BEV_RANGE),
    };
    let scene = SceneAnnotation {
        lanes,
        speed,
        signal: world.signal,
    };
    (scene, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::interpret;
    use crate::scene::validate;
    use crate::sim::scenario::{gen_scenario, Agent, ScenarioKind};
    use crate::sim::geometry::rect;

    fn world_at(spec: &ScenarioSpec, s: f64) -> WorldState {
        let (p, yaw) = spec.route.sample(s);
        WorldState {
            t: 0.0,
            ego: VehicleState { x: p[0], y: p[1], yaw, v: 5.0 },
            agents: agent_footprints(spec, 0.0),
            signal: spec.signal_at(0.0),
        }
    }

    #[test]
    fn step_laws() {
        let spec = gen_scenario(1, ScenarioKind::Straight);
        let w = WorldState::initial(&spec);
        let idle = ControlCommand::from_accel(0.0, 0.0);
        let n = step(&w, &spec, idle, 0.1);
        assert_eq!(n.ego, w.ego);
        assert_eq!(n.agents, w.agents);
        assert!((n.t - 0.1).abs() < 1e-15);

        // Half steps against a full step for a constant command.
        let mut moving = w.clone();
        moving.ego.v = 6.0;
        let cmd = ControlCommand::from_accel(0.3, 0.5);
        let full = step(&moving, &spec, cmd, 0.1);
        let half = step(&step(&moving, &spec, cmd, 0.05), &spec, cmd, 0.05);
        let gap = dist([full.ego.x, full.ego.y], [half.ego.x, half.ego.y]);
        assert!(gap < 0.1 * 0.1 * 6.0, "gap {gap}");
        assert!((full.t - half.t).abs() < 1e-12);
    }

    #[test]
    fn agents_follow_schedule() {
        let spec = gen_scenario(2, ScenarioKind::MultiLane);
        let mut w = WorldState::initial(&spec);
        let a0 = w.agents.clone();
        let idle = ControlCommand::from_accel(0.0, 0.0);
        for _ in 0..20 {
            w = step(&w, &spec, idle, 0.1);
        }
        assert_eq!(w.agents, agent_footprints(&spec, w.t));
        let a2 = agent_footprints(&spec, 2.0);
        let v = spec.agents[0].velocity;
        for (p, q) in a0[0].iter().zip(&a2[0]) {
            assert_eq!(q[0], p[0] + v[0] * 2.0);
            assert_eq!(q[1], p[1] + v[1] * 2.0);
        }
    }

    #[test]
    fn straight_annotation_is_valid_and_free() {
        let spec = gen_scenario(3, ScenarioKind::Straight);
        let (scene, target) = annotate(&WorldState::initial(&spec), &spec, AnnotateOptions::default());
        assert!(validate(&scene).is_empty(), "{:?}", validate(&scene));
        assert_eq!(scene.lanes.len(), 1);
        let lane = &scene.lanes[0];
        assert_eq!(lane.left.len(), POINTS_PER_EDGE);
        assert!(lane.points().all(|p| p.occ == 1));
        assert_eq!((lane.intersection, lane.direction), (0, 1));
        assert!(lane.left.points.iter().all(|p| (p.y - 1.75).abs() < 1e-9));
        assert!((target.x - 20.0).abs() < 1e-9 && target.y.abs() < 1e-9);
        let traj = interpret(&scene).unwrap();
        assert!(traj.path.len() >= 2 && !traj.stop);
        assert!(traj.path.iter().all(|p| p[0] >= -PLAN_BEHIND - 1e-9 && p[0] <= PLAN_AHEAD + 1e-9));
    }

    #[test]
    fn parked_agent_clears_its_cells() {
        let mut spec = gen_scenario(3, ScenarioKind::Straight);
        spec.agents.push(Agent {
            footprint: rect([25.0, 0.0], 0.0, 4.5, 2.0),
            velocity: [0.0, 0.0],
            lane: Some(0),
        });
        let (scene, _) = annotate(&world_at(&spec, 20.0), &spec, AnnotateOptions::default());
        let lane = &scene.lanes[0];
        let blocked: Vec<usize> = (0..lane.pairs()).filter(|&j| lane.left.points[j].occ == 0).collect();
        assert!(!blocked.is_empty());
        for j in 0..lane.pairs() {
            let m = lane.midpoint(j);
            // Cells overlapping the agent (x in [12.75, 17.25] in ego frame).
            let spacing = lane.midpoint(1)[0] - lane.midpoint(0)[0];
            let overlaps = m[0] + spacing / 2.0 >= 12.75 && m[0] - spacing / 2.0 <= 17.25;
            assert_eq!(blocked.contains(&j), overlaps, "pair {j} at {m:?}");
        }
        assert!(interpret(&scene).unwrap().stop);
    }

    #[test]
    fn junction_route_lanes_are_marked() {
        let spec = gen_scenario(4, ScenarioKind::Intersection);
        let entry = spec.lanes[0].centerline.length();
        let world = world_at(&spec, entry - 3.0);
        let (scene, _) = annotate(&world, &spec, AnnotateOptions::default());
        assert!(validate(&scene).is_empty());
        let planned_int = scene
            .lanes
            .iter()
            .filter(|l| l.intersection == 1 && l.points().any(|p| p.plan == 1))
            .count();
        assert_eq!(planned_int, 1);
        // Oncoming lanes point against the route.
        assert!(scene.lanes.iter().any(|l| l.direction == 0));
        for l in scene.lanes.iter().filter(|l| l.points().any(|p| p.plan == 1)) {
            assert_eq!(l.direction, 1);
        }
    }

    #[test]
    fn straightest_chain_goes_through() {
        let mut spec = gen_scenario(0, ScenarioKind::Intersection);
        spec.route_lanes = vec![0, 2, 5];
        let ego = spec.ego_start();
        let guided = corridor(&spec, &ego, true).unwrap();
        let free = corridor(&spec, &ego, false).unwrap();
        assert_eq!(guided.lanes, vec![0, 2, 5]);
        assert_eq!(free.lanes, vec![0, 1, 4]);
        assert!((guided.ego_s - free.ego_s).abs() < 1e-9);
    }

    #[test]
    fn off_route_ego_gets_empty_corridor() {
        let spec = gen_scenario(1, ScenarioKind::Straight);
        let mut world = WorldState::initial(&spec);
        world.ego.y += 8.0;
        let (scene, _) = annotate(&world, &spec, AnnotateOptions::default());
        assert!(scene.lanes.iter().all(|l| l.points().all(|p| p.plan == 0)));
    }
}
