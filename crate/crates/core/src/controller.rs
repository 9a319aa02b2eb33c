//! Lattice-search MPC over a kinematic bicycle model.

use crate::interpreter::Trajectory;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const MAX_STEER_ANGLE: f64 = 35.0 * PI / 180.0;
pub const MAX_ACCEL: f64 = 3.0;
pub const MAX_DECEL: f64 = 8.0;
pub const DRAG: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("no path to track")]
    NoPath,
    #[error("invalid controller config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlCommand {
    pub const FULL_BRAKE: ControlCommand = ControlCommand {
        steer: 0.0,
        throttle: 0.0,
        brake: 1.0,
    };

    /// Signed longitudinal input in `[-1, 1]` split into throttle or brake.
    pub fn from_accel(steer: f64, u: f64) -> Self {
        let u = u.clamp(-1.0, 1.0);
        Self {
            steer: steer.clamp(-1.0, 1.0),
            throttle: u.max(0.0),
            brake: (-u).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub wheelbase: f64,
    pub w_cross_track: f64,
    pub w_heading: f64,
    pub w_speed: f64,
    pub w_steer_rate: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            dt: 0.1,
            wheelbase: 2.8,
            w_cross_track: 1.0,
            w_heading: 2.0,
            w_speed: 0.2,
            w_steer_rate: 0.5,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.horizon == 0 {
            return Err(ControlError::Config("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return Err(ControlError::Config("dt and wheelbase must be positive".into()));
        }
        Ok(())
    }
}

/// Wraps an angle to `(-pi, pi]`. Odd-symmetric bit for bit away from
/// the branch cut.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = a - 2.0 * PI * (a / (2.0 * PI)).round();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

pub fn bicycle_step(s: VehicleState, c: ControlCommand, dt: f64, wheelbase: f64) -> VehicleState {
    let steer = c.steer.clamp(-1.0, 1.0) * MAX_STEER_ANGLE;
    let accel = MAX_ACCEL * c.throttle.clamp(0.0, 1.0) - MAX_DECEL * c.brake.clamp(0.0, 1.0) - DRAG * s.v;
    VehicleState {
        x: s.x + s.v * s.yaw.cos() * dt,
        y: s.y + s.v * s.yaw.sin() * dt,
        yaw: wrap_angle(s.yaw + s.v / wheelbase * steer.tan() * dt),
        v: (s.v + accel * dt).max(0.0),
    }
}

/// Reference polyline with its first and last segments extended to
/// infinity, so every position has a projection.
#[derive(Debug, Clone)]
pub struct Polyline {
    pts: Vec<[f64; 2]>,
}

impl Polyline {
    pub fn new(path: &[[f64; 2]]) -> Self {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(path.len());
        for &p in path {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
        Self { pts }
    }

    /// Signed lateral offset (positive = left of the path) and path
    /// heading at the closest point.
    pub fn errors(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.pts.len();
        if n == 1 {
            let p = self.pts[0];
            return (0.0, (p[1] - y).atan2(p[0] - x));
        }
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..n - 1 {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let mut t = ((x - a[0]) * dx + (y - a[1]) * dy) / len2;
            if i > 0 {
                t = t.max(0.0);
            }
            if i < n - 2 {
                t = t.min(1.0);
            }
            let (px, py) = (a[0] + t * dx, a[1] + t * dy);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            if d2 < best.0 {
                let cross = dx * (y - a[1]) - dy * (x - a[0]);
                let signed = d2.sqrt() * if cross < 0.0 { -1.0 } else if cross > 0.0 { 1.0 } else { 0.0 };
                best = (d2, signed, dy.atan2(dx));
            }
        }
        (best.1, best.2)
    }
}

const STEER_STEPS: [f64; 3] = [1.0 / 3.0, 1.0 / 9.0, 1.0 / 27.0];
const ACCEL_STEPS: [f64; 3] = [0.5, 0.15, 0.05];

struct Problem<'a> {
    path: &'a Polyline,
    start: VehicleState,
    prev_steer: f64,
    v_ref: f64,
    cfg: &'a MpcConfig,
}

impl Problem<'_> {
    fn cost(&self, steer: &[f64], accel: &[f64]) -> f64 {
        let c = self.cfg;
        let mut s = self.start;
        let mut last = self.prev_steer;
        let mut total = 0.0;
        for k in 0..c.horizon {
            s = bicycle_step(s, ControlCommand::from_accel(steer[k], accel[k]), c.dt, c.wheelbase);
            let (ct, heading) = self.path.errors(s.x, s.y);
            let he = wrap_angle(s.yaw - heading);
            let dv = s.v - self.v_ref;
            let ds = steer[k] - last;
            total += c.w_cross_track * ct * ct + c.w_heading * he * he + c.w_speed * dv * dv + c.w_steer_rate * ds * ds;
            last = steer[k];
        }
        total
    }
}

/// Picks among `base + o * step` for `o` in `-r..=r`. Ties go to the
/// smaller offset; a tie between `+o` and `-o` keeps `base`, so the choice
/// commutes with mirroring.
fn best_offset(r: i32, mut cost_at: impl FnMut(i32) -> f64) -> i32 {
    let costs: Vec<(i32, f64)> = (-r..=r).map(|o| (o, cost_at(o))).collect();
    let min = costs.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let winners: Vec<i32> = costs.iter().filter(|c| c.1 == min).map(|c| c.0).collect();
    let smallest = winners.iter().map(|o| o.abs()).min().unwrap_or(0);
    if winners.contains(&smallest) && winners.contains(&-smallest) && smallest != 0 {
        0
    } else {
        winners.into_iter().find(|o| o.abs() == smallest).unwrap_or(0)
    }
}

/// Receding-horizon control: returns the first command of the optimized
/// sequence. `prev_steer` is the steer applied on the previous tick.
pub fn track(traj: &Trajectory, state: VehicleState, prev_steer: f64, cfg: &MpcConfig) -> Result<ControlCommand, ControlError> {
    if traj.stop {
        return Ok(ControlCommand::FULL_BRAKE);
    }
    if traj.path.is_empty() {
        return Err(ControlError::NoPath);
    }
    cfg.validate()?;
    let path = Polyline::new(&traj.path);
    let problem = Problem {
        path: &path,
        start: state,
        prev_steer,
        v_ref: traj.speed,
        cfg,
    };
    let h = cfg.horizon;
    let mut steer = vec![0.0; h];
    let mut accel = vec![0.0; h];
    for level in 0..STEER_STEPS.len() {
        for k in 0..h {
            let base = steer[k];
            let o = best_offset(3, |o| {
                let mut trial = steer.clone();
                trial[k] = (base + o as f64 * STEER_STEPS[level]).clamp(-1.0, 1.0);
                problem.cost(&trial, &accel)
            });
            steer[k] = (base + o as f64 * STEER_STEPS[level]).clamp(-1.0, 1.0);

            let base = accel[k];
            let o = best_offset(2, |o| {
                let mut trial = accel.clone();
                trial[k] = (base + o as f64 * ACCEL_STEPS[level]).clamp(-1.0, 1.0);
                problem.cost(&steer, &trial)
            });
            accel[k] = (base + o as f64 * ACCEL_STEPS[level]).clamp(-1.0, 1.0);
        }
    }
    Ok(ControlCommand::from_accel(steer[0], accel[0]))
}
