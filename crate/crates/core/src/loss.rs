//! Training losses with analytic gradients, and a finite-difference checker.

use crate::matching::{align, clamp_prob, point_cost, Assignment, PROB_CLAMP};
use crate::perception::PerceptionOutput;
use crate::scene::{DoubleEdge, EdgePoint, SceneAnnotation, Signal, TargetPoint};
use crate::tensor::{softmax_slice, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Lower bound on the point-to-target distance in the plan loss.
pub const MIN_TARGET_DISTANCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ground-truth lane {lane} has {found} points per edge, expected {expected}")]
    PointCount { lane: usize, found: usize, expected: usize },
    #[error("{gt} ground-truth lanes exceed {slots} prediction slots")]
    TooManyLanes { gt: usize, slots: usize },
    #[error("unknown loss term '{0}'")]
    UnknownTerm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Matching: lane-class cost.
    pub alpha: f64,
    /// Matching: point cost.
    pub beta: f64,
    pub edge_bev: f64,
    pub int: f64,
    pub dir: f64,
    pub occ: f64,
    pub plan: f64,
    pub speed: f64,
    pub signal: f64,
    /// Focusing factor of the plan loss.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 2.0,
            edge_bev: 5.0,
            int: 2.0,
            dir: 1.0,
            occ: 3.0,
            plan: 4.0,
            speed: 1.0,
            signal: 0.1,
            rho: 0.25,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            edge_bev: self.edge_bev * k,
            int: self.int * k,
            dir: self.dir * k,
            occ: self.occ * k,
            plan: self.plan * k,
            speed: self.speed * k,
            signal: self.signal * k,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub edge_bev: f64,
    pub int: f64,
    pub dir: f64,
    pub occ: f64,
    pub plan: f64,
    pub speed: f64,
    pub signal: f64,
    pub total: f64,
}

/// Flat prediction tensors for one frame. Also used as the gradient
/// container, with identical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub lanes: usize,
    pub points: usize,
    /// `lanes * points * 2`, lane-major, left edge first within a lane.
    pub xy: Vec<f64>,
    pub int: Vec<f64>,
    pub dir: Vec<f64>,
    /// `lanes * points`
    pub occ: Vec<f64>,
    pub plan: Vec<f64>,
    pub speed: f64,
    pub signal: Vec<f64>,
}

impl Prediction {
    pub fn zeros(lanes: usize, points: usize) -> Self {
        Self {
            lanes,
            points,
            xy: vec![0.0; lanes * points * 2],
            int: vec![0.0; lanes],
            dir: vec![0.0; lanes],
            occ: vec![0.0; lanes * points],
            plan: vec![0.0; lanes * points],
            speed: 0.0,
            signal: vec![0.0; Signal::ALL.len()],
        }
    }

    pub fn from_outputs(out: &PerceptionOutput, p_plan: &Tensor) -> Self {
        let s = out.points.shape();
        Self {
            lanes: s[0],
            points: s[1],
            xy: out.points.data().to_vec(),
            int: out.p_int.data().to_vec(),
            dir: out.p_dir.data().to_vec(),
            occ: out.p_occ.data().to_vec(),
            plan: p_plan.data().to_vec(),
            speed: out.speed,
            signal: out.signal_logits.data().to_vec(),
        }
    }

    pub fn lane_points(&self, slot: usize) -> Vec<[f64; 2]> {
        let base = slot * self.points * 2;
        (0..self.points)
            .map(|p| [self.xy[base + 2 * p], self.xy[base + 2 * p + 1]])
            .collect()
    }

    pub fn all_lane_points(&self) -> Vec<Vec<[f64; 2]>> {
        (0..self.lanes).map(|j| self.lane_points(j)).collect()
    }

    pub fn scalars(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(&self.xy);
        v.extend(&self.int);
        v.extend(&self.dir);
        v.extend(&self.occ);
        v.extend(&self.plan);
        v.push(self.speed);
        v.extend(&self.signal);
        v
    }

    pub fn scalars_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.xy
            .iter_mut()
            .chain(self.int.iter_mut())
            .chain(self.dir.iter_mut())
            .chain(self.occ.iter_mut())
            .chain(self.plan.iter_mut())
            .chain(std::iter::once(&mut self.speed))
            .chain(self.signal.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene: SceneAnnotation,
    pub target: TargetPoint,
}

impl GroundTruth {
    pub fn check(&self, pred: &Prediction) -> Result<(), LossError> {
        if self.scene.lanes.len() > pred.lanes {
            return Err(LossError::TooManyLanes {
                gt: self.scene.lanes.len(),
                slots: pred.lanes,
            });
        }
        for (i, l) in self.scene.lanes.iter().enumerate() {
            for e in [&l.left, &l.right] {
                if 2 * e.len() != pred.points {
                    return Err(LossError::PointCount {
                        lane: i,
                        found: e.len(),
                        expected: pred.points / 2,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Where gradient contributions go, and how much they are scaled.
struct Sink<'a> {
    grad: &'a mut Prediction,
    scale: f64,
}

fn prob_grad(p: f64, g: f64) -> f64 {
    // Clamping makes the loss flat outside the open interval.
    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        g
    } else {
        0.0
    }
}

fn alpha_t(y: u8) -> f64 {
    if y == 1 {
        FOCAL_ALPHA
    } else {
        1.0 - FOCAL_ALPHA
    }
}

/// Focal loss for one binary label, with `alpha_t` weighting.
pub fn focal(p: f64, y: u8) -> f64 {
    let q = clamp_prob(p);
    let pt = if y == 1 { q } else { 1.0 - q };
    -alpha_t(y) * (1.0 - pt).powf(FOCAL_GAMMA) * pt.ln()
}

fn focal_grad(p: f64, y: u8) -> f64 {
    let q = clamp_prob(p);
    let pt = if y == 1 { q } else { 1.0 - q };
    let m = 1.0 - pt;
    let d_pt = -alpha_t(y) * (-FOCAL_GAMMA * m.powf(FOCAL_GAMMA - 1.0) * pt.ln() + m.powf(FOCAL_GAMMA) / pt);
    prob_grad(p, if y == 1 { d_pt } else { -d_pt })
}

/// Mean focal loss; 0 for empty input.
pub fn focal_loss(probs: &[f64], gts: &[u8]) -> f64 {
    assert_eq!(probs.len(), gts.len());
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().zip(gts).map(|(&p, &y)| focal(p, y)).sum::<f64>() / probs.len() as f64
}

pub fn bce(p: f64, y: u8) -> f64 {
    crate::matching::lane_cost(p, y)
}

fn bce_grad(p: f64, y: u8) -> f64 {
    let q = clamp_prob(p);
    prob_grad(p, if y == 1 { -1.0 / q } else { 1.0 / (1.0 - q) })
}

pub fn smooth_l1(pred: f64, gt: f64) -> f64 {
    let d = (pred - gt).abs();
    if d < SMOOTH_L1_BETA {
        0.5 * d * d / SMOOTH_L1_BETA
    } else {
        d - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(pred: f64, gt: f64) -> f64 {
    let d = pred - gt;
    if d.abs() < SMOOTH_L1_BETA {
        d / SMOOTH_L1_BETA
    } else {
        d.signum()
    }
}

/// Softmax cross-entropy of `class` under `logits`.
pub fn ce_signal(logits: &[f64], class: usize) -> f64 {
    let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = hi + logits.iter().map(|z| (z - hi).exp()).sum::<f64>().ln();
    lse - logits[class]
}

fn plan_term(ce: f64, rho: f64, d: f64) -> f64 {
    let f = rho * (1.0 - (-ce).exp());
    f * f * ce / d
}

fn plan_term_grad(ce: f64, rho: f64, d: f64) -> f64 {
    let e = (-ce).exp();
    rho * rho * (2.0 * (1.0 - e) * e * ce + (1.0 - e) * (1.0 - e)) / d
}

/// Focal-modulated cross-entropy per point, divided by the distance of
/// the ground-truth point to the target, summed.
pub fn plan_loss(probs: &[f64], gts: &[u8], points: &[[f64; 2]], target: TargetPoint, rho: f64) -> f64 {
    assert!(probs.len() == gts.len() && gts.len() == points.len());
    probs
        .iter()
        .zip(gts)
        .zip(points)
        .map(|((&p, &y), pt)| plan_term(bce(p, y), rho, target_distance(*pt, target)))
        .sum()
}

pub fn target_distance(p: [f64; 2], t: TargetPoint) -> f64 {
    (p[0] - t.x).hypot(p[1] - t.y).max(MIN_TARGET_DISTANCE)
}

fn matched<'a>(gt: &'a GroundTruth, asg: &'a Assignment) -> impl Iterator<Item = (&'a DoubleEdge, usize)> + 'a {
    asg.pairs.iter().map(move |&(i, j)| (&gt.scene.lanes[i], j))
}

fn edge_bev_term(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, sink: Option<&mut Sink>) -> f64 {
    let n_gt = asg.pairs.len();
    if n_gt == 0 {
        return 0.0;
    }
    let inv = 1.0 / n_gt as f64;
    let total: f64 = matched(gt, asg).map(|(g, j)| point_cost(&pred.lane_points(j), g)).sum();
    if let Some(s) = sink {
        for (g, j) in matched(gt, asg) {
            for (p, gp) in g.points().enumerate() {
                let k = (j * pred.points + p) * 2;
                s.grad.xy[k] += s.scale * inv * (pred.xy[k] - gp.x).signum();
                s.grad.xy[k + 1] += s.scale * inv * (pred.xy[k + 1] - gp.y).signum();
            }
        }
    }
    total * inv
}

/// Matched slots are supervised with their lane's bit; unmatched slots
/// toward 0.
fn int_term(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, sink: Option<&mut Sink>) -> f64 {
    let owner = asg.by_slot(pred.lanes);
    let labels: Vec<u8> = owner
        .iter()
        .map(|o| o.map_or(0, |i| gt.scene.lanes[i].intersection))
        .collect();
    if let Some(s) = sink {
        let inv = 1.0 / pred.lanes as f64;
        for j in 0..pred.lanes {
            s.grad.int[j] += s.scale * inv * focal_grad(pred.int[j], labels[j]);
        }
    }
    focal_loss(&pred.int, &labels)
}

fn dir_term(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, sink: Option<&mut Sink>) -> f64 {
    let (probs, labels): (Vec<f64>, Vec<u8>) = matched(gt, asg).map(|(g, j)| (pred.dir[j], g.direction)).unzip();
    if let Some(s) = sink {
        let inv = 1.0 / probs.len().max(1) as f64;
        for (g, j) in matched(gt, asg) {
            s.grad.dir[j] += s.scale * inv * focal_grad(pred.dir[j], g.direction);
        }
    }
    focal_loss(&probs, &labels)
}

fn point_pairs<'a>(
    pred: &'a Prediction,
    gt: &'a GroundTruth,
    asg: &'a Assignment,
) -> impl Iterator<Item = (usize, &'a EdgePoint)> + 'a {
    matched(gt, asg).flat_map(move |(g, j)| g.points().enumerate().map(move |(p, gp)| (j * pred.points + p, gp)))
}

fn occ_term(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, sink: Option<&mut Sink>) -> f64 {
    let (probs, labels): (Vec<f64>, Vec<u8>) = point_pairs(pred, gt, asg).map(|(k, g)| (pred.occ[k], g.occ)).unzip();
    if let Some(s) = sink {
        let inv = 1.0 / probs.len().max(1) as f64;
        for (k, g) in point_pairs(pred, gt, asg) {
            s.grad.occ[k] += s.scale * inv * focal_grad(pred.occ[k], g.occ);
        }
    }
    focal_loss(&probs, &labels)
}

fn plan_loss_term(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, rho: f64, sink: Option<&mut Sink>) -> f64 {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut pts = Vec::new();
    for (k, g) in point_pairs(pred, gt, asg) {
        probs.push(pred.plan[k]);
        labels.push(g.plan);
        pts.push(g.xy());
    }
    if let Some(s) = sink {
        for (k, g) in point_pairs(pred, gt, asg) {
            let ce = bce(pred.plan[k], g.plan);
            let d = target_distance(g.xy(), gt.target);
            s.grad.plan[k] += s.scale * plan_term_grad(ce, rho, d) * bce_grad(pred.plan[k], g.plan);
        }
    }
    plan_loss(&probs, &labels, &pts, gt.target, rho)
}

fn speed_term(pred: &Prediction, gt: &GroundTruth, sink: Option<&mut Sink>) -> f64 {
    if let Some(s) = sink {
        s.grad.speed += s.scale * smooth_l1_grad(pred.speed, gt.scene.speed);
    }
    smooth_l1(pred.speed, gt.scene.speed)
}

fn signal_term(pred: &Prediction, gt: &GroundTruth, sink: Option<&mut Sink>) -> f64 {
    let class = gt.scene.signal.class_index();
    if let Some(s) = sink {
        let mut probs = pred.signal.clone();
        softmax_slice(&mut probs);
        for (c, p) in probs.iter().enumerate() {
            let onehot = if c == class { 1.0 } else { 0.0 };
            s.grad.signal[c] += s.scale * (p - onehot);
        }
    }
    ce_signal(&pred.signal, class)
}

/// Individually addressable scalar objectives for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    EdgeBev,
    Int,
    Dir,
    Occ,
    Plan,
    Speed,
    Signal,
    /// Weighted matching cost of the fixed assignment.
    Matching,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 9] = [
        LossTerm::EdgeBev,
        LossTerm::Int,
        LossTerm::Dir,
        LossTerm::Occ,
        LossTerm::Plan,
        LossTerm::Speed,
        LossTerm::Signal,
        LossTerm::Matching,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::EdgeBev => "edge_bev",
            LossTerm::Int => "int",
            LossTerm::Dir => "dir",
            LossTerm::Occ => "occ",
            LossTerm::Plan => "plan",
            LossTerm::Speed => "speed",
            LossTerm::Signal => "signal",
            LossTerm::Matching => "matching",
            LossTerm::Total => "total",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, LossError> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| LossError::UnknownTerm(s.to_string()))
    }
}

fn matching_term(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, w: &LossWeights, sink: Option<&mut Sink>) -> f64 {
    let value = matched(gt, asg)
        .map(|(g, j)| w.alpha * bce(pred.int[j], g.intersection) + w.beta * point_cost(&pred.lane_points(j), g))
        .sum();
    if let Some(s) = sink {
        for (g, j) in matched(gt, asg) {
            s.grad.int[j] += s.scale * w.alpha * bce_grad(pred.int[j], g.intersection);
            for (p, gp) in g.points().enumerate() {
                let k = (j * pred.points + p) * 2;
                s.grad.xy[k] += s.scale * w.beta * (pred.xy[k] - gp.x).signum();
                s.grad.xy[k + 1] += s.scale * w.beta * (pred.xy[k + 1] - gp.y).signum();
            }
        }
    }
    value
}

/// Value of one term, and optionally its gradient (accumulated, scaled).
fn eval_term(
    term: LossTerm,
    pred: &Prediction,
    gt: &GroundTruth,
    asg: &Assignment,
    w: &LossWeights,
    mut sink: Option<&mut Sink>,
) -> f64 {
    match term {
        LossTerm::EdgeBev => edge_bev_term(pred, gt, asg, sink),
        LossTerm::Int => int_term(pred, gt, asg, sink),
        LossTerm::Dir => dir_term(pred, gt, asg, sink),
        LossTerm::Occ => occ_term(pred, gt, asg, sink),
        LossTerm::Plan => plan_loss_term(pred, gt, asg, w.rho, sink),
        LossTerm::Speed => speed_term(pred, gt, sink),
        LossTerm::Signal => signal_term(pred, gt, sink),
        LossTerm::Matching => matching_term(pred, gt, asg, w, sink),
        LossTerm::Total => {
            let parts = [
                (LossTerm::EdgeBev, w.edge_bev),
                (LossTerm::Int, w.int),
                (LossTerm::Dir, w.dir),
                (LossTerm::Occ, w.occ),
                (LossTerm::Plan, w.plan),
                (LossTerm::Speed, w.speed),
                (LossTerm::Signal, w.signal),
            ];
            let mut total = 0.0;
            for (t, k) in parts {
                let mut sub = sink.as_deref_mut().map(|s| Sink {
                    grad: &mut *s.grad,
                    scale: s.scale * k,
                });
                total += k * eval_term(t, pred, gt, asg, w, sub.as_mut());
            }
            total
        }
    }
}

pub fn assign(pred: &Prediction, gt: &GroundTruth, w: &LossWeights) -> Result<Assignment, LossError> {
    gt.check(pred)?;
    Ok(align(&pred.all_lane_points(), &pred.int, &gt.scene.lanes, w.alpha, w.beta))
}

/// All terms and the weighted total for a fixed assignment.
pub fn total_loss(pred: &Prediction, gt: &GroundTruth, asg: &Assignment, w: &LossWeights) -> LossReport {
    let term = |t| eval_term(t, pred, gt, asg, w, None);
    let mut r = LossReport {
        edge_bev: term(LossTerm::EdgeBev),
        int: term(LossTerm::Int),
        dir: term(LossTerm::Dir),
        occ: term(LossTerm::Occ),
        plan: term(LossTerm::Plan),
        speed: term(LossTerm::Speed),
        signal: term(LossTerm::Signal),
        total: 0.0,
    };
    r.total = w.edge_bev * r.edge_bev
        + w.int * r.int
        + w.dir * r.dir
        + w.occ * r.occ
        + w.plan * r.plan
        + w.speed * r.speed
        + w.signal * r.signal;
    r
}

/// Value and analytic gradient of one term.
pub fn value_and_grad(
    term: LossTerm,
    pred: &Prediction,
    gt: &GroundTruth,
    asg: &Assignment,
    w: &LossWeights,
) -> (f64, Prediction) {
    let mut grad = Prediction::zeros(pred.lanes, pred.points);
    let value = eval_term(
        term,
        pred,
        gt,
        asg,
        w,
        Some(&mut Sink {
            grad: &mut grad,
            scale: 1.0,
        }),
    );
    (value, grad)
}

/// A small random loss problem, sampled away from the L1 kinks.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub seed: u64,
    pub pred: Prediction,
    pub gt: GroundTruth,
}

impl GradInstance {
    pub fn random(seed: u64, lanes: usize, points: usize) -> Self {
        assert!(lanes >= 1 && points >= 2 && points % 2 == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = points / 2;
        let n_gt = rng.random_range(1..=lanes);
        let edge = |rng: &mut ChaCha8Rng| {
            let pts = (0..half)
                .map(|_| {
                    let (x, y) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
                    EdgePoint::new(x, y, rng.random_range(0..=1), rng.random_range(0..=1))
                })
                .collect();
            crate::scene::Edge::new(pts)
        };
        let gts: Vec<DoubleEdge> = (0..n_gt)
            .map(|_| DoubleEdge {
                left: edge(&mut rng),
                right: edge(&mut rng),
                intersection: rng.random_range(0..=1),
                direction: rng.random_range(0..=1),
            })
            .collect();
        let scene = SceneAnnotation {
            lanes: gts,
            speed: rng.random_range(0.0..15.0),
            signal: Signal::ALL[rng.random_range(0..4)],
        };
        let target = TargetPoint {
            x: rng.random_range(-20.0..20.0),
            y: rng.random_range(-20.0..20.0),
        };
        let mut pred = Prediction::zeros(lanes, points);
        let away = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| loop {
            let v: f64 = rng.random_range(lo..hi);
            if v.abs() > 0.05 {
                return v;
            }
        };
        // Slots start near a random gt lane so the matching is non-trivial.
        for j in 0..lanes {
            let src = &scene.lanes[rng.random_range(0..n_gt)];
            for (p, gp) in src.points().enumerate() {
                pred.xy[(j * points + p) * 2] = gp.x + away(&mut rng, -2.0, 2.0);
                pred.xy[(j * points + p) * 2 + 1] = gp.y + away(&mut rng, -2.0, 2.0);
            }
        }
        let prob = |rng: &mut ChaCha8Rng| rng.random_range(0.05..0.95);
        pred.int.iter_mut().for_each(|v| *v = prob(&mut rng));
        pred.dir.iter_mut().for_each(|v| *v = prob(&mut rng));
        pred.occ.iter_mut().for_each(|v| *v = prob(&mut rng));
        pred.plan.iter_mut().for_each(|v| *v = prob(&mut rng));
        // Keep the speed residual off the smooth-L1 transition at 1.
        pred.speed = scene.speed + loop {
            let d: f64 = away(&mut rng, -3.0, 3.0);
            if (d.abs() - SMOOTH_L1_BETA).abs() > 0.05 {
                break d;
            }
        };
        pred.signal.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        Self {
            seed,
            pred,
            gt: GroundTruth { scene, target },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub loss: String,
    pub max_rel_err: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// Relative error floor for coordinates whose gradient is near zero.
const REL_FLOOR: f64 = 1e-6;

/// Analytic gradient of `term` against central differences over every
/// prediction scalar, with the assignment held fixed.
pub fn grad_check(term: LossTerm, inst: &GradInstance, epsilon: f64) -> Result<GradReport, LossError> {
    let w = LossWeights::default();
    let asg = assign(&inst.pred, &inst.gt, &w)?;
    let (_, analytic) = value_and_grad(term, &inst.pred, &inst.gt, &asg, &w);
    let analytic = analytic.scalars();
    let mut max_rel_err: f64 = 0.0;
    for (idx, a) in analytic.iter().enumerate() {
        let eval = |delta: f64| {
            let mut p = inst.pred.clone();
            *p.scalars_mut().nth(idx).expect("index in range") += delta;
            eval_term(term, &p, &inst.gt, &asg, &w, None)
        };
        let numeric = (eval(epsilon) - eval(-epsilon)) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradReport {
        loss: term.name().to_string(),
        max_rel_err,
        epsilon,
        seed: inst.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::straight_lane;

    fn perfect() -> (Prediction, GroundTruth) {
        let mut lane = straight_lane(2, 1, 1);
        lane.left.points[1].occ = 0;
        lane.direction = 1;
        let scene = SceneAnnotation {
            lanes: vec![lane.clone()],
            speed: 7.0,
            signal: Signal::Red,
        };
        let mut pred = Prediction::zeros(2, 4);
        for (p, gp) in lane.points().enumerate() {
            pred.xy[2 * p] = gp.x;
            pred.xy[2 * p + 1] = gp.y;
            pred.occ[p] = gp.occ as f64;
            pred.plan[p] = gp.plan as f64;
        }
        pred.int = vec![0.0, 0.0];
        pred.dir = vec![1.0, 0.5];
        pred.speed = 7.0;
        pred.signal = vec![-30.0, 30.0, -30.0, -30.0];
        let gt = GroundTruth {
            scene,
            target: TargetPoint { x: 10.0, y: 0.0 },
        };
        (pred, gt)
    }

    #[test]
    fn default_weight_ratios() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta), (5.0, 2.0));
        assert_eq!(
            [w.edge_bev, w.int, w.dir, w.occ, w.plan, w.speed, w.signal],
            [5.0, 2.0, 1.0, 3.0, 4.0, 1.0, 0.1]
        );
        assert_eq!(w.rho, 0.25);
    }

    #[test]
    fn focal_and_smooth_l1_closed_forms() {
        assert!(focal(1.0, 1) < 1e-12);
        assert!(focal(0.0, 0) < 1e-12);
        let p: f64 = 0.3;
        let expected = -0.25 * 0.7f64.powi(2) * p.ln();
        assert!((focal(p, 1) - expected).abs() < 1e-15);
        assert_eq!(smooth_l1(3.0, 3.0), 0.0);
        assert_eq!(smooth_l1(2.0, 0.0), 1.5);
        assert_eq!(smooth_l1(0.5, 0.0), 0.125);
        let l = [0.0, 0.0, 0.0, 0.0];
        assert!((ce_signal(&l, 2) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn plan_loss_distance_law() {
        let t = TargetPoint { x: 0.0, y: 0.0 };
        let near = plan_loss(&[0.3], &[1], &[[1.0, 0.0]], t, 0.25);
        let far = plan_loss(&[0.3], &[1], &[[0.0, 2.0]], t, 0.25);
        assert!((near - 2.0 * far).abs() < 1e-15);
        // Closer than the clamp behaves like the clamp distance.
        let inside = plan_loss(&[0.3], &[1], &[[0.1, 0.0]], t, 0.25);
        let clamp = plan_loss(&[0.3], &[1], &[[0.5, 0.0]], t, 0.25);
        assert_eq!(inside, clamp);
        assert!(plan_loss(&[1.0], &[1], &[[3.0, 0.0]], t, 0.25) < 1e-12);
    }

    #[test]
    fn plan_loss_matches_loop_oracle() {
        let inst = GradInstance::random(5, 3, 4);
        let t = inst.gt.target;
        let mut oracle = 0.0;
        let mut probs = Vec::new();
        let mut gts = Vec::new();
        let mut pts = Vec::new();
        for (k, g) in inst.gt.scene.lanes[0].points().enumerate() {
            let p = inst.pred.plan[k];
            let ce = if g.plan == 1 { -p.ln() } else { -(1.0 - p).ln() };
            let d = ((g.x - t.x).powi(2) + (g.y - t.y).powi(2)).sqrt().max(0.5);
            oracle += (0.25 * (1.0 - (-ce).exp())).powi(2) * ce / d;
            probs.push(p);
            gts.push(g.plan);
            pts.push([g.x, g.y]);
        }
        assert!((plan_loss(&probs, &gts, &pts, t, 0.25) - oracle).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let (pred, gt) = perfect();
        let w = LossWeights::default();
        let asg = assign(&pred, &gt, &w).unwrap();
        assert_eq!(asg.pairs, vec![(0, 0)]);
        let r = total_loss(&pred, &gt, &asg, &w);
        for v in [r.edge_bev, r.int, r.dir, r.occ, r.plan, r.speed, r.signal] {
            assert!((0.0..=1e-6).contains(&v), "{r:?}");
        }
    }

    #[test]
    fn edge_bev_offset_example() {
        let (mut pred, gt) = perfect();
        for p in 0..4 {
            pred.xy[2 * p + 1] += 0.5;
        }
        let w = LossWeights::default();
        let asg = assign(&pred, &gt, &w).unwrap();
        let r = total_loss(&pred, &gt, &asg, &w);
        assert_eq!(r.edge_bev, 2.0);
        let sum: f64 = asg
            .pairs
            .iter()
            .map(|&(i, j)| point_cost(&pred.lane_points(j), &gt.scene.lanes[i]))
            .sum();
        assert_eq!(r.edge_bev, sum / asg.pairs.len() as f64);
    }

    #[test]
    fn total_is_weighted_sum_and_homogeneous() {
        let inst = GradInstance::random(9, 3, 4);
        let w = LossWeights::default();
        let asg = assign(&inst.pred, &inst.gt, &w).unwrap();
        let r = total_loss(&inst.pred, &inst.gt, &asg, &w);
        let hand = 5.0 * r.edge_bev + 2.0 * r.int + 1.0 * r.dir + 3.0 * r.occ + 4.0 * r.plan + r.speed + 0.1 * r.signal;
        assert!((r.total - hand).abs() < 1e-12);
        let doubled = total_loss(&inst.pred, &inst.gt, &asg, &w.scaled(2.0));
        assert!((doubled.total - 2.0 * r.total).abs() < 1e-12);
        let (v, _) = value_and_grad(LossTerm::Total, &inst.pred, &inst.gt, &asg, &w);
        assert!((v - r.total).abs() < 1e-12);
    }

    #[test]
    fn mismatched_gt_is_rejected() {
        let (pred, mut gt) = perfect();
        gt.scene.lanes[0].left.points.pop();
        assert!(matches!(assign(&pred, &gt, &LossWeights::default()), Err(LossError::PointCount { .. })));
        let (pred, mut gt) = perfect();
        gt.scene.lanes = vec![gt.scene.lanes[0].clone(); 3];
        assert!(matches!(assign(&pred, &gt, &LossWeights::default()), Err(LossError::TooManyLanes { .. })));
    }

    #[test]
    fn term_names_round_trip() {
        for t in LossTerm::ALL {
            assert_eq!(t.name().parse::<LossTerm>().unwrap(), t);
        }
        assert!("nope".parse::<LossTerm>().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let inst = GradInstance::random(seed, 3, 4);
            for t in LossTerm::ALL {
                let r = grad_check(t, &inst, 1e-5).unwrap();
                assert!(r.max_rel_err < 1e-4, "{t} seed {seed}: {}", r.max_rel_err);
            }
        }
    }
}
