//! Bipartite alignment between ground-truth lanes and prediction slots.

use crate::scene::DoubleEdge;
use serde::Serialize;

pub const PROB_CLAMP: f64 = 1e-7;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Negative log-likelihood of `gt` under a Bernoulli with parameter `p`.
/// `p` is clamped to `[1e-7, 1 - 1e-7]`.
pub fn lane_cost(p: f64, gt: u8) -> f64 {
    let p = clamp_prob(p);
    -(if gt == 1 { p } else { 1.0 - p }).ln()
}

/// L1 distance over both edges. `pred` holds the slot's `N_p` points,
/// left edge first.
pub fn point_cost(pred: &[[f64; 2]], gt: &DoubleEdge) -> f64 {
    assert_eq!(pred.len(), gt.left.len() + gt.right.len(), "point count mismatch");
    pred.iter()
        .zip(gt.points())
        .map(|(p, g)| (p[0] - g.x).abs() + (p[1] - g.y).abs())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// `(gt index, prediction slot)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn slot_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|(g, _)| *g == gt).map(|(_, s)| *s)
    }

    /// `matched[j]` is the gt index assigned to slot `j`, if any.
    pub fn by_slot(&self, slots: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; slots];
        for &(g, s) in &self.pairs {
            out[s] = Some(g);
        }
        out
    }
}

/// Minimum-cost assignment of every row to a distinct column; requires
/// `rows <= cols`. Shortest augmenting path with potentials, `O(n^2 m)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows ({n}) than columns ({m})");
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Cost of pairing gt lane `i` with every slot.
pub fn cost_matrix(
    pred_points: &[Vec<[f64; 2]>],
    pred_int: &[f64],
    gts: &[DoubleEdge],
    alpha: f64,
    beta: f64,
) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| {
            pred_points
                .iter()
                .zip(pred_int)
                .map(|(pts, &p)| alpha * lane_cost(p, g.intersection) + beta * point_cost(pts, g))
                .collect()
        })
        .collect()
}

/// Assignment from an explicit cost matrix (gt rows, slot columns).
pub fn align_costs(cost: &[Vec<f64>]) -> Assignment {
    let cols = hungarian(cost);
    let pairs: Vec<_> = cols.iter().copied().enumerate().collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Assignment { pairs, total_cost }
}

pub fn align(pred_points: &[Vec<[f64; 2]>], pred_int: &[f64], gts: &[DoubleEdge], alpha: f64, beta: f64) -> Assignment {
    align_costs(&cost_matrix(pred_points, pred_int, gts, alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force};
    use crate::scene::tests::straight_lane;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lane_cost_closed_forms() {
        assert!(lane_cost(1.0 - 1e-7, 1) < 1e-6);
        assert!((lane_cost(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((lane_cost(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((lane_cost(0.9, 0) - 2.302585092994046).abs() < 1e-9);
        // Clamped, so still finite.
        assert!(lane_cost(0.0, 1).is_finite());
        assert!(lane_cost(1.0, 0).is_finite());
    }

    #[test]
    fn point_cost_laws() {
        let gt = straight_lane(10, 1, 0);
        let exact: Vec<[f64; 2]> = gt.points().map(|p| p.xy()).collect();
        assert_eq!(point_cost(&exact, &gt), 0.0);
        let shifted: Vec<[f64; 2]> = exact.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert_eq!(point_cost(&shifted, &gt), 20.0);
    }

    #[test]
    fn two_by_two_example() {
        let a = align_costs(&[vec![1.0, 2.0], vec![3.0, 1.0]]);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let a = align_costs(&[vec![5.0]]);
        assert_eq!(a.pairs, vec![(0, 0)]);
        let a = align_costs(&[]);
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn rectangular_picks_best_columns() {
        let a = align_costs(&[vec![9.0, 1.0, 8.0], vec![7.0, 2.0, 3.0]]);
        assert_eq!(a.pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(a.total_cost, 4.0);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..200 {
            let n = 1 + trial % 6;
            let m = n + rng.random_range(0..3);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let a = align_costs(&cost);
            let mut cols: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), n, "not injective");
            assert!((a.total_cost - brute_force(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn align_recovers_shuffled_slots() {
        let gts: Vec<DoubleEdge> = (0..3)
            .map(|k| {
                let mut l = straight_lane(10, 1, 0);
                l.points_mut().for_each(|p| p.y += 4.0 * k as f64);
                l
            })
            .collect();
        let order = [2usize, 0, 1];
        let pts: Vec<Vec<[f64; 2]>> = order
            .iter()
            .map(|&g| gts[g].points().map(|p| [p.x + 0.1, p.y]).collect())
            .collect();
        let a = align(&pts, &[0.1, 0.1, 0.1], &gts, 5.0, 2.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 2), (2, 0)]);
    }
}
