//! Naive reference implementations used as independent oracles by the
//! property checks.

use crate::nn::Init;
use crate::perception::FeatureBundle;
use crate::scene::SceneAnnotation;
use crate::tensor::Tensor;

/// Loop-only reference: no reshapes, no matmul, explicit softmax.
pub fn naive_fuse(b: &FeatureBundle, gamma: f64) -> Tensor {
    let s = b.double_edge.shape();
    let (e, nd, np) = (s[0], s[1], s[2]);
    let n = nd * np;
    let mut m = vec![vec![0.0; n]; n];
    for a in 0..n {
        for c in 0..n {
            for r in 0..e {
                m[a][c] += b.int.get(&[r, a / np]) * b.dir.get(&[r, c / np]);
            }
        }
    }
    for row in &mut m {
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - hi).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - hi).exp() / z);
    }
    let mut out = Tensor::zeros(&[e, nd, np]);
    for r in 0..e {
        for a in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += m[a][c] * b.occ.get(&[r, c / np, c % np]);
            }
            let de = b.double_edge.get(&[r, a / np, a % np]);
            out.set(&[r, a / np, a % np], gamma * acc + de);
        }
    }
    out
}

/// Exhaustive search over injective row-to-column maps.
pub fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    if cost.is_empty() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

/// Restated with explicit loops; lanes ordered by an insertion sort on the
/// distance of their first planned midpoint.
pub fn naive_path(scene: &SceneAnnotation) -> Vec<[f64; 2]> {
    let mut firsts: Vec<(f64, usize)> = Vec::new();
    for (i, lane) in scene.lanes.iter().enumerate() {
        let n = lane.left.points.len().min(lane.right.points.len());
        for j in 0..n {
            let (l, r) = (&lane.left.points[j], &lane.right.points[j]);
            if l.plan == 1 && r.plan == 1 {
                let (x, y) = ((l.x + r.x) / 2.0, (l.y + r.y) / 2.0);
                firsts.push(((x * x + y * y).sqrt(), i));
                break;
            }
        }
    }
    // Insertion sort keeps equal keys in lane order.
    for a in 1..firsts.len() {
        let mut b = a;
        while b > 0 && firsts[b - 1].0 > firsts[b].0 {
            firsts.swap(b - 1, b);
            b -= 1;
        }
    }
    let mut path = Vec::new();
    for (_, i) in firsts {
        let lane = &scene.lanes[i];
        let n = lane.left.points.len().min(lane.right.points.len());
        for j in 0..n {
            let (l, r) = (&lane.left.points[j], &lane.right.points[j]);
            if l.plan == 1 && r.plan == 1 {
                path.push([(l.x + r.x) / 2.0, (l.y + r.y) / 2.0]);
            }
        }
    }
    path
}

/// Uniform random bundle with `E x N_d (x N_p)` tensors.
pub fn random_bundle(seed: u64, e: usize, nd: usize, np: usize) -> FeatureBundle {
    let mut init = Init::new(seed, 1);
    FeatureBundle {
        double_edge: init.uniform(&[e, nd, np]),
        int: init.uniform(&[e, nd]),
        dir: init.uniform(&[e, nd]),
        occ: init.uniform(&[e, nd, np]),
    }
}
