//! Target-guided planning branch.

use crate::nn::{sigmoid, AttentionStats, Init, Linear, Mlp, Module, MultiHeadAttention};
use crate::perception::{NetConfig, NetError};
use crate::scene::{TargetPoint, BEV_RANGE};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;

pub const FOURIER_FREQS: usize = 16;

#[derive(Debug, Clone)]
pub struct TargetPlanner {
    embed_dim: usize,
    /// `FOURIER_FREQS x 2`, fixed after construction.
    freqs: Tensor,
    encoder: Mlp,
    tsa: MultiHeadAttention,
    tpa: MultiHeadAttention,
    mlp: Mlp,
    pta: MultiHeadAttention,
    pub head: Linear,
}

impl Module for TargetPlanner {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{p}.fourier.freqs"), &self.freqs);
        self.encoder.visit(&format!("{p}.encoder"), f);
        self.tsa.visit(&format!("{p}.tsa"), f);
        self.tpa.visit(&format!("{p}.tpa"), f);
        self.mlp.visit(&format!("{p}.mlp"), f);
        self.pta.visit(&format!("{p}.pta"), f);
        self.head.visit(&format!("{p}.head"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{p}.fourier.freqs"), &mut self.freqs);
        self.encoder.visit_mut(&format!("{p}.encoder"), f);
        self.tsa.visit_mut(&format!("{p}.tsa"), f);
        self.tpa.visit_mut(&format!("{p}.tpa"), f);
        self.mlp.visit_mut(&format!("{p}.mlp"), f);
        self.pta.visit_mut(&format!("{p}.pta"), f);
        self.head.visit_mut(&format!("{p}.head"), f);
    }
}

impl TargetPlanner {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let e = config.embed_dim;
        let mut init = Init::new(seed, e);
        let freqs = Tensor::from_fn(&[FOURIER_FREQS, 2], |_| init.rng().random_range(-4.0..4.0));
        Ok(Self {
            embed_dim: e,
            freqs,
            encoder: Mlp::new(&mut init, 2 * FOURIER_FREQS, config.hidden, e),
            tsa: MultiHeadAttention::new(&mut init, e, config.heads),
            tpa: MultiHeadAttention::new(&mut init, e, config.heads),
            mlp: Mlp::new(&mut init, e, config.hidden, e),
            pta: MultiHeadAttention::new(&mut init, e, config.heads),
            head: Linear::new(&mut init, e, 1),
        })
    }

    /// Random-Fourier lift of the BEV-normalized point, then the MLP.
    /// Returns a single `E x 1` target token.
    pub fn encode_target(&self, t: TargetPoint) -> Tensor {
        let (x, y) = (t.x / BEV_RANGE, t.y / BEV_RANGE);
        let mut lift = Tensor::zeros(&[2 * FOURIER_FREQS, 1]);
        for k in 0..FOURIER_FREQS {
            let phase = std::f64::consts::TAU * (self.freqs.get(&[k, 0]) * x + self.freqs.get(&[k, 1]) * y);
            lift.data_mut()[2 * k] = phase.sin();
            lift.data_mut()[2 * k + 1] = phase.cos();
        }
        self.encoder.forward(&lift)
    }

    /// TSA, TPA, MLP and PTA, each with a residual connection.
    pub fn plan_decode(
        &self,
        f_vec: &Tensor,
        f_plan: &Tensor,
        mut stats: Option<&mut AttentionStats>,
    ) -> Result<Tensor, TensorError> {
        let e = self.embed_dim;
        let shape = f_plan.shape().to_vec();
        if shape.len() != 3 || shape[0] != e || f_vec.rank() != 2 || f_vec.shape()[0] != e {
            return Err(TensorError::ShapeMismatch {
                op: "plan_decode",
                left: f_vec.shape().to_vec(),
                right: shape,
            });
        }
        let lanes = f_plan.reshape(&[e, shape[1] * shape[2]])?;
        let mut t = f_vec.add(&self.tsa.forward(f_vec, f_vec, stats.as_deref_mut()))?;
        t.add_assign(&self.tpa.forward(&t, &lanes, stats.as_deref_mut()))?;
        t.add_assign(&self.mlp.forward(&t))?;
        let out = lanes.add(&self.pta.forward(&lanes, &t, stats))?;
        out.reshape(&shape)
    }

    /// Linear + sigmoid per point: `N_d x N_p x 1`.
    pub fn plan_head(&self, big_f_plan: &Tensor) -> Result<Tensor, TensorError> {
        let s = big_f_plan.shape();
        if s.len() != 3 || s[0] != self.embed_dim {
            return Err(TensorError::ShapeMismatch {
                op: "plan_head",
                left: s.to_vec(),
                right: vec![self.embed_dim],
            });
        }
        let (nd, np) = (s[1], s[2]);
        let flat = big_f_plan.reshape(&[self.embed_dim, nd * np])?;
        self.head.forward(&flat).map(sigmoid).reshape(&[nd, np, 1])
    }

    pub fn forward(&self, target: TargetPoint, f_plan: &Tensor) -> Result<Tensor, TensorError> {
        let f_vec = self.encode_target(target);
        self.plan_head(&self.plan_decode(&f_vec, f_plan, None)?)
    }

    /// Tensor used when the planner is ablated: `f_plan` goes straight to
    /// the head.
    pub fn passthrough(&self, f_plan: &Tensor) -> Result<Tensor, TensorError> {
        self.plan_head(f_plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planner() -> TargetPlanner {
        TargetPlanner::new(&NetConfig::small(), 21).unwrap()
    }

    fn f_plan(seed: u64) -> Tensor {
        Init::new(seed, 1).uniform(&[16, 3, 4])
    }

    #[test]
    fn target_embedding_is_deterministic_and_local() {
        let p = planner();
        let a = p.encode_target(TargetPoint { x: 20.0, y: 0.0 });
        assert_eq!(a.shape(), &[16, 1]);
        assert_eq!(a, p.encode_target(TargetPoint { x: 20.0, y: 0.0 }));
        let b = p.encode_target(TargetPoint { x: 20.0, y: 10.0 });
        let l2: f64 = a.sub(&b).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(l2 > 0.0);
    }

    #[test]
    fn decode_shapes_and_attention_rows() {
        let p = planner();
        let f_vec = p.encode_target(TargetPoint { x: 15.0, y: -3.0 });
        let mut stats = AttentionStats::default();
        let out = p.plan_decode(&f_vec, &f_plan(1), Some(&mut stats)).unwrap();
        assert_eq!(out.shape(), &[16, 3, 4]);
        // TSA and TPA have one query row per head, PTA one per lane point.
        assert_eq!(stats.rows, 4 * (1 + 1 + 12));
        assert!(stats.max_row_sum_error < 1e-6);
        assert!(p.plan_decode(&f_vec, &Tensor::zeros(&[8, 3, 4]), None).is_err());
    }

    #[test]
    fn single_token_self_attention_weight_is_one() {
        let p = planner();
        let f_vec = p.encode_target(TargetPoint { x: 5.0, y: 5.0 });
        let mut stats = AttentionStats::default();
        let out = p.tsa.forward(&f_vec, &f_vec, Some(&mut stats));
        assert_eq!(stats.min_weight, 1.0);
        // With one token the block reduces to out(v(x)).
        let reference = p.tsa.out.forward(&p.tsa.v.forward(&f_vec));
        assert!(out.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn head_laws() {
        let mut p = planner();
        p.head.bias = Tensor::zeros(&[1]);
        let zero = p.plan_head(&Tensor::zeros(&[16, 3, 4])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.5));
        assert_eq!(zero.shape(), &[3, 4, 1]);

        let f = f_plan(2);
        let base = p.plan_head(&f).unwrap();
        assert!(base.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // Moving every point along the head weight raises its probability.
        let w = p.head.weight.clone();
        let shifted = Tensor::from_fn(&[16, 3, 4], |i| f.data()[i] + 0.5 * w.data()[i / 12]);
        let raised = p.plan_head(&shifted).unwrap();
        for (a, b) in base.data().iter().zip(raised.data()) {
            assert!(b > a);
        }
    }

    #[test]
    fn lane_permutation_equivariance() {
        let p = planner();
        let t = TargetPoint { x: 18.0, y: 2.0 };
        let f = f_plan(3);
        let perm = [2usize, 0, 1];
        let permuted = Tensor::from_fn(&[16, 3, 4], |i| {
            let (r, lane, pt) = (i / 12, (i / 4) % 3, i % 4);
            f.get(&[r, perm[lane], pt])
        });
        let a = p.forward(t, &f).unwrap();
        let b = p.forward(t, &permuted).unwrap();
        for lane in 0..3 {
            for pt in 0..4 {
                let d = a.get(&[perm[lane], pt, 0]) - b.get(&[lane, pt, 0]);
                assert!(d.abs() < 1e-12);
            }
        }
        assert_eq!(a, p.forward(t, &f).unwrap());
    }
}
