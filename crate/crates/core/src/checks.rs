//! Property suites behind `lanecraft check`: analytic gradients, matching
//! optimality and fusion against naive oracles.

use crate::fusion::{fuse, FusionParams};
use crate::loss::{grad_check, GradInstance, LossError, LossTerm, LossWeights};
use crate::matching::{align, cost_matrix};
use crate::oracle::{brute_force, naive_fuse, random_bundle};
use crate::scene::{DoubleEdge, Edge, EdgePoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPSILON: f64 = 1e-5;
pub const FUSION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub tolerance: f64,
    pub cases: usize,
    /// Largest error seen; for matching, the number of disagreements.
    pub worst: f64,
    pub passed: bool,
    pub failures: Vec<Value>,
}

impl CheckReport {
    fn new(check: &str, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            tolerance,
            cases: 0,
            worst: 0.0,
            passed: true,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, err: f64, ok: bool, case: impl FnOnce() -> Value) {
        self.cases += 1;
        self.worst = self.worst.max(err);
        if !ok {
            self.passed = false;
            self.failures.push(case());
        }
    }
}

/// Central differences against the analytic gradient of every loss term
/// on `instances` random problems of 3 slots and 4 points per lane.
pub fn check_grad(instances: u64) -> Result<CheckReport, LossError> {
    let mut report = CheckReport::new("grad", GRAD_TOLERANCE);
    for seed in 0..instances {
        let inst = GradInstance::random(seed, 3, 4);
        for term in LossTerm::ALL {
            let r = grad_check(term, &inst, GRAD_EPSILON)?;
            report.record(r.max_rel_err, r.max_rel_err < GRAD_TOLERANCE, || json!(r));
        }
    }
    Ok(report)
}

fn random_lane(rng: &mut ChaCha8Rng, half: usize) -> DoubleEdge {
    let edge = |rng: &mut ChaCha8Rng| {
        Edge::new(
            (0..half)
                .map(|_| EdgePoint::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 1, 0))
                .collect(),
        )
    };
    DoubleEdge {
        left: edge(rng),
        right: edge(rng),
        intersection: rng.random_range(0..=1),
        direction: 1,
    }
}

/// Alignment against exhaustive permutation search, `N_gt` cycling
/// through 1..=6 and up to two spare prediction slots.
pub fn check_match(trials: u64, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("match", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 2;
    let w = LossWeights::default();
    for trial in 0..trials {
        let n_gt = (trial % 6) as usize + 1;
        let slots = n_gt + rng.random_range(0..=2);
        let gts: Vec<DoubleEdge> = (0..n_gt).map(|_| random_lane(&mut rng, half)).collect();
        let pred_points: Vec<Vec<[f64; 2]>> = (0..slots)
            .map(|_| random_lane(&mut rng, half).points().map(|p| p.xy()).collect())
            .collect();
        let pred_int: Vec<f64> = (0..slots).map(|_| rng.random_range(0.01..0.99)).collect();
        let asg = align(&pred_points, &pred_int, &gts, w.alpha, w.beta);
        let best = brute_force(&cost_matrix(&pred_points, &pred_int, &gts, w.alpha, w.beta));
        let ok = asg.total_cost == best;
        report.record(f64::from(u8::from(!ok)), ok, || {
            json!({"trial": trial, "n_gt": n_gt, "slots": slots, "align": asg.total_cost, "exhaustive": best})
        });
    }
    report.worst = report.failures.len() as f64;
    report
}

/// Fusion against the loop oracle on random `E=16, N_d=3, N_p=4` bundles,
/// plus the bitwise `gamma = 0` identity.
pub fn check_fusion(instances: u64, identity_instances: u64) -> CheckReport {
    let mut report = CheckReport::new("fusion", FUSION_TOLERANCE);
    let (e, nd, np) = (16, 3, 4);
    for seed in 0..instances {
        let b = random_bundle(seed, e, nd, np);
        let gamma = ChaCha8Rng::seed_from_u64(seed).random_range(-2.0..2.0);
        let diff = match fuse(&b, FusionParams { gamma }) {
            Ok(fast) => fast.max_abs_diff(&naive_fuse(&b, gamma)),
            Err(_) => f64::INFINITY,
        };
        report.record(diff, diff < FUSION_TOLERANCE, || json!({"seed": seed, "gamma": gamma, "max_abs_diff": diff}));
    }
    for seed in 0..identity_instances {
        let b = random_bundle(1_000 + seed, e, nd, np);
        let same = fuse(&b, FusionParams { gamma: 0.0 }).is_ok_and(|f| f.data() == b.double_edge.data());
        report.record(0.0, same, || json!({"seed": 1_000 + seed, "identity": false}));
    }
    report
}
