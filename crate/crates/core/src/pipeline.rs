//! Network-mode planning stack and its latency benchmark.

use crate::controller::{track, ControlCommand, ControlError, MpcConfig, VehicleState};
use crate::fusion::{fuse, FusionModule, FusionParams};
use crate::interpreter::{binarize, interpret, InterpretError, SceneProbabilities, Trajectory, DEFAULT_TAU};
use crate::loss::Prediction;
use crate::nn::{Module, ParamStore, WeightError};
use crate::perception::{NetConfig, NetError, PerceptionNet};
use crate::planner::TargetPlanner;
use crate::scene::{SceneAnnotation, TargetPoint};
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// Switches for target-guided planning, hierarchical early fusion and
/// double-edge late fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub tgp: bool,
    pub hef: bool,
    pub dlf: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        tgp: true,
        hef: true,
        dlf: true,
    };
    pub const NONE: Ablation = Ablation {
        tgp: false,
        hef: false,
        dlf: false,
    };

    /// Cumulative rows: nothing, then +TGP, +HEF, +DLF.
    pub fn ladder() -> [(char, Ablation); 4] {
        let b = Ablation { tgp: true, ..Self::NONE };
        let c = Ablation { hef: true, ..b };
        [('A', Self::NONE), ('B', b), ('C', c), ('D', Self::FULL)]
    }

    /// Applies late fusion: without it the trajectory never stops.
    pub fn apply(&self, mut traj: Trajectory) -> Trajectory {
        if !self.dlf {
            traj.stop = false;
        }
        traj
    }
}

/// Perception network, early fusion and target planner with shared config.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub net: PerceptionNet,
    pub fusion: FusionModule,
    pub planner: TargetPlanner,
    pub ablation: Ablation,
}

impl Pipeline {
    pub fn new(config: NetConfig, seed: u64, ablation: Ablation) -> Result<Self, PipelineError> {
        Ok(Self {
            net: PerceptionNet::new(config, seed)?,
            fusion: FusionModule::new(FusionParams::default()),
            planner: TargetPlanner::new(&config, seed.wrapping_add(1))?,
            ablation,
        })
    }

    pub fn config(&self) -> &NetConfig {
        self.net.config()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = self.net.to_store();
        self.fusion.export("fusion", &mut store);
        self.planner.export("planner", &mut store);
        store
    }

    pub fn load_store(&mut self, store: &ParamStore) -> Result<(), PipelineError> {
        self.net.load_store(store)?;
        self.fusion.import("fusion", store)?;
        self.planner.import("planner", store)?;
        Ok(())
    }

    fn fusion_params(&self) -> FusionParams {
        if self.ablation.hef {
            self.fusion.params()
        } else {
            FusionParams { gamma: 0.0 }
        }
    }

    /// Raw network prediction for a scene observation.
    pub fn predict(&self, observed: &SceneAnnotation, target: TargetPoint, seed: u64) -> Result<Prediction, PipelineError> {
        let (out, bundle) = self.net.forward(observed, seed)?;
        let f_plan = fuse(&bundle, self.fusion_params())?;
        let p_plan = if self.ablation.tgp {
            self.planner.forward(target, &f_plan)?
        } else {
            self.planner.passthrough(&f_plan)?
        };
        Ok(Prediction::from_outputs(&out, &p_plan))
    }

    /// Binary scene as perceived by the network.
    pub fn perceive(&self, observed: &SceneAnnotation, target: TargetPoint, seed: u64) -> Result<SceneAnnotation, PipelineError> {
        let pred = self.predict(observed, target, seed)?;
        Ok(binarize(&SceneProbabilities::from_network(&pred), DEFAULT_TAU))
    }

    /// Perceived scene to trajectory, with late fusion per the ablation.
    pub fn plan(&self, observed: &SceneAnnotation, target: TargetPoint, seed: u64) -> Result<Trajectory, PipelineError> {
        let scene = self.perceive(observed, target, seed)?;
        Ok(self.ablation.apply(interpret(&scene)?))
    }

    /// One full tick: perception through control.
    pub fn tick(
        &self,
        observed: &SceneAnnotation,
        target: TargetPoint,
        state: VehicleState,
        prev_steer: f64,
        mpc: &MpcConfig,
    ) -> Result<(Trajectory, ControlCommand), PipelineError> {
        let traj = self.plan(observed, target, 0)?;
        let cmd = match track(&traj, state, prev_steer, mpc) {
            Ok(c) => c,
            Err(ControlError::NoPath) => ControlCommand::FULL_BRAKE,
            Err(e) => return Err(e.into()),
        };
        Ok((traj, cmd))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub ticks: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub config: NetConfig,
}

/// Value at quantile `q` of sorted samples, nearest-rank.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `ticks` full pipeline ticks on one scene after one warm-up tick.
pub fn bench(
    pipeline: &Pipeline,
    observed: &SceneAnnotation,
    target: TargetPoint,
    ticks: usize,
) -> Result<BenchReport, PipelineError> {
    let mpc = MpcConfig::default();
    let state = VehicleState { x: 0.0, y: 0.0, yaw: 0.0, v: 5.0 };
    pipeline.tick(observed, target, state, 0.0, &mpc)?;
    let mut ms = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let t0 = Instant::now();
        let out = pipeline.tick(observed, target, state, 0.0, &mpc)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    ms.sort_by(f64::total_cmp);
    let median_ms = quantile(&ms, 0.5);
    Ok(BenchReport {
        ticks,
        median_ms,
        p95_ms: quantile(&ms, 0.95),
        fps: 1e3 / median_ms,
        config: *pipeline.config(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::straight_lane;
    use crate::scene::Signal;

    fn scene() -> SceneAnnotation {
        SceneAnnotation {
            lanes: vec![straight_lane(2, 1, 1)],
            speed: 5.0,
            signal: Signal::Green,
        }
    }

    #[test]
    fn ladder_is_cumulative() {
        let rows = Ablation::ladder();
        assert_eq!(rows[0].1, Ablation::NONE);
        assert_eq!(rows[3].1, Ablation::FULL);
        for w in rows.windows(2) {
            let (a, b) = (w[0].1, w[1].1);
            assert!(b.tgp >= a.tgp && b.hef >= a.hef && b.dlf >= a.dlf);
        }
    }

    #[test]
    fn no_dlf_never_stops() {
        let t = Trajectory {
            path: vec![[0.0, 0.0]],
            speed: 1.0,
            stop: true,
        };
        assert!(!Ablation::NONE.apply(t.clone()).stop);
        assert!(Ablation::FULL.apply(t).stop);
    }

    #[test]
    fn hef_off_matches_zero_gamma() {
        let mut p = Pipeline::new(NetConfig::small(), 3, Ablation::FULL).unwrap();
        p.fusion = FusionModule::new(FusionParams { gamma: 0.7 });
        let target = TargetPoint { x: 10.0, y: 0.0 };
        let on = p.predict(&scene(), target, 0).unwrap();
        p.ablation.hef = false;
        let off = p.predict(&scene(), target, 0).unwrap();
        p.ablation.hef = true;
        p.fusion = FusionModule::new(FusionParams { gamma: 0.0 });
        let zero = p.predict(&scene(), target, 0).unwrap();
        assert_eq!(off.plan, zero.plan);
        assert_ne!(on.plan, off.plan);
        assert_eq!(on.occ, off.occ);
    }

    #[test]
    fn store_round_trip() {
        let a = Pipeline::new(NetConfig::small(), 1, Ablation::FULL).unwrap();
        let mut b = Pipeline::new(NetConfig::small(), 2, Ablation::FULL).unwrap();
        b.load_store(&a.to_store()).unwrap();
        let target = TargetPoint { x: 5.0, y: 1.0 };
        assert_eq!(a.predict(&scene(), target, 0).unwrap(), b.predict(&scene(), target, 0).unwrap());
    }

    #[test]
    fn tick_is_deterministic() {
        let p = Pipeline::new(NetConfig::small(), 4, Ablation::FULL).unwrap();
        let s = VehicleState { x: 0.0, y: 0.0, yaw: 0.0, v: 3.0 };
        let target = TargetPoint { x: 8.0, y: 0.0 };
        let a = p.tick(&scene(), target, s, 0.0, &MpcConfig::default()).unwrap();
        let b = p.tick(&scene(), target, s, 0.0, &MpcConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), 50.0);
        assert_eq!(quantile(&v, 0.95), 95.0);
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn bench_schema() {
        let p = Pipeline::new(NetConfig::small(), 5, Ablation::FULL).unwrap();
        let r = bench(&p, &scene(), TargetPoint { x: 5.0, y: 0.0 }, 5).unwrap();
        assert_eq!(r.ticks, 5);
        assert!(r.median_ms > 0.0 && r.p95_ms >= r.median_ms);
        assert!((r.fps - 1e3 / r.median_ms).abs() < 1e-9);
        let json = serde_json::to_string(&r).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
