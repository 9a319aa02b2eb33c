//! Toy-scale double-edge transformer.
//!
//! Camera features are replaced by [`synthetic_features`], a deterministic
//! rasterization of a scene into per-view grids. Everything downstream of
//! that (tokenization, encoder, query decoder, feature branches and heads)
//! follows the full architecture at whatever size [`NetConfig`] asks for.

use crate::nn::{sigmoid, softplus, AttentionStats, Init, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, ParamStore, WeightError};
use crate::scene::{SceneAnnotation, BEV_RANGE};
use crate::tensor::{sinusoidal_pe, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub lanes: usize,
    pub points: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub views: usize,
    /// Width of every two-layer MLP in the network and planner.
    pub hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl NetConfig {
    /// E=256, K=6, 8 heads, 30 lanes x 20 points, four 7x7 views.
    pub fn reference() -> Self {
        Self {
            embed_dim: 256,
            layers: 6,
            heads: 8,
            lanes: 30,
            points: 20,
            grid_h: 7,
            grid_w: 7,
            views: 4,
            hidden: 128,
        }
    }

    /// The small configuration used throughout the tests.
    pub fn small() -> Self {
        Self {
            embed_dim: 16,
            layers: 2,
            heads: 4,
            lanes: 3,
            points: 4,
            grid_h: 2,
            grid_w: 3,
            views: 4,
            hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let positive = [
            self.embed_dim,
            self.heads,
            self.lanes,
            self.points,
            self.grid_h,
            self.grid_w,
            self.views,
            self.hidden,
        ];
        if positive.contains(&0) {
            return Err(NetError::Config("all sizes must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(NetError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(NetError::Config(format!("embed_dim {} not divisible by 4", self.embed_dim)));
        }
        if self.points % 2 != 0 {
            return Err(NetError::Config(format!("points per lane {} must be even", self.points)));
        }
        Ok(())
    }

    pub fn points_per_edge(&self) -> usize {
        self.points / 2
    }

    pub fn lane_points(&self) -> usize {
        self.lanes * self.points
    }

    pub fn tokens(&self) -> usize {
        self.views * self.grid_h * self.grid_w
    }
}

/// Learned decoder queries.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `E x (N_d * N_p)`: lane `i`, point `p` lives in column `i * N_p + p`.
    pub double_edge: Tensor,
    pub speed: Tensor,
    pub signal: Tensor,
}

impl Module for QuerySet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.double_edge"), &self.double_edge);
        f(format!("{prefix}.speed"), &self.speed);
        f(format!("{prefix}.signal"), &self.signal);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{prefix}.double_edge"), &mut self.double_edge);
        f(format!("{prefix}.speed"), &mut self.speed);
        f(format!("{prefix}.signal"), &mut self.signal);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `E x N_d x N_p`
    pub double_edge: Tensor,
    /// `E x N_d`
    pub int: Tensor,
    /// `E x N_d`
    pub dir: Tensor,
    /// `E x N_d x N_p`
    pub occ: Tensor,
}

impl FeatureBundle {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let (e, nd, np) = (cfg.embed_dim, cfg.lanes, cfg.points);
        Self {
            double_edge: Tensor::zeros(&[e, nd, np]),
            int: Tensor::zeros(&[e, nd]),
            dir: Tensor::zeros(&[e, nd]),
            occ: Tensor::zeros(&[e, nd, np]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionOutput {
    /// `N_d x N_p x 2` BEV metres; points `0..N_p/2` are the left edge.
    pub points: Tensor,
    /// `N_d x 1`
    pub p_int: Tensor,
    /// `N_d x 1`
    pub p_dir: Tensor,
    /// `N_d x N_p x 1`
    pub p_occ: Tensor,
    pub speed: f64,
    /// Logits over green/red/yellow/none.
    pub signal_logits: Tensor,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderLayer {
    fn new(init: &mut Init, cfg: &NetConfig) -> Self {
        let e = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(e),
            attn: MultiHeadAttention::new(init, e, cfg.heads),
            norm2: LayerNorm::new(e),
            mlp: Mlp::new(init, e, cfg.hidden, e),
        }
    }

    fn forward(&self, x: &Tensor, stats: Option<&mut AttentionStats>) -> Tensor {
        let h = self.norm1.forward(x);
        let mut x = x.add(&self.attn.forward(&h, &h, stats)).expect("residual");
        let h = self.norm2.forward(&x);
        x.add_assign(&self.mlp.forward(&h)).expect("residual");
        x
    }
}

impl Module for EncoderLayer {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit(&format!("{p}.norm1"), f);
        self.attn.visit(&format!("{p}.attn"), f);
        self.norm2.visit(&format!("{p}.norm2"), f);
        self.mlp.visit(&format!("{p}.mlp"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.norm1.visit_mut(&format!("{p}.norm1"), f);
        self.attn.visit_mut(&format!("{p}.attn"), f);
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
        self.mlp.visit_mut(&format!("{p}.mlp"), f);
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    mlp: Mlp,
}

impl DecoderLayer {
    fn new(init: &mut Init, cfg: &NetConfig) -> Self {
        let e = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(e),
            self_attn: MultiHeadAttention::new(init, e, cfg.heads),
            norm2: LayerNorm::new(e),
            cross_attn: MultiHeadAttention::new(init, e, cfg.heads),
            norm3: LayerNorm::new(e),
            mlp: Mlp::new(init, e, cfg.hidden, e),
        }
    }

    fn forward(&self, q: &Tensor, memory: &Tensor, mut stats: Option<&mut AttentionStats>) -> Tensor {
        let h = self.norm1.forward(q);
        let mut q = q.add(&self.self_attn.forward(&h, &h, stats.as_deref_mut())).expect("residual");
        let h = self.norm2.forward(&q);
        q.add_assign(&self.cross_attn.forward(&h, memory, stats)).expect("residual");
        let h = self.norm3.forward(&q);
        q.add_assign(&self.mlp.forward(&h)).expect("residual");
        q
    }
}

impl Module for DecoderLayer {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit(&format!("{p}.norm1"), f);
        self.self_attn.visit(&format!("{p}.self_attn"), f);
        self.norm2.visit(&format!("{p}.norm2"), f);
        self.cross_attn.visit(&format!("{p}.cross_attn"), f);
        self.norm3.visit(&format!("{p}.norm3"), f);
        self.mlp.visit(&format!("{p}.mlp"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.norm1.visit_mut(&format!("{p}.norm1"), f);
        self.self_attn.visit_mut(&format!("{p}.self_attn"), f);
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
        self.cross_attn.visit_mut(&format!("{p}.cross_attn"), f);
        self.norm3.visit_mut(&format!("{p}.norm3"), f);
        self.mlp.visit_mut(&format!("{p}.mlp"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub bev: Mlp,
    pub int: Linear,
    pub dir: Linear,
    pub occ: Linear,
    pub speed: Linear,
    pub signal: Linear,
}

impl Module for Heads {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.bev.visit(&format!("{p}.bev"), f);
        self.int.visit(&format!("{p}.int"), f);
        self.dir.visit(&format!("{p}.dir"), f);
        self.occ.visit(&format!("{p}.occ"), f);
        self.speed.visit(&format!("{p}.speed"), f);
        self.signal.visit(&format!("{p}.signal"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.bev.visit_mut(&format!("{p}.bev"), f);
        self.int.visit_mut(&format!("{p}.int"), f);
        self.dir.visit_mut(&format!("{p}.dir"), f);
        self.occ.visit_mut(&format!("{p}.occ"), f);
        self.speed.visit_mut(&format!("{p}.speed"), f);
        self.signal.visit_mut(&format!("{p}.signal"), f);
    }
}

#[derive(Debug, Clone)]
pub struct PerceptionNet {
    config: NetConfig,
    projection: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    pub queries: QuerySet,
    int_branch: Mlp,
    dir_branch: Mlp,
    occ_branch: Mlp,
    pub heads: Heads,
}

impl Module for PerceptionNet {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.projection.visit(&format!("{p}.projection"), f);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("{p}.encoder.{i}"), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("{p}.decoder.{i}"), f);
        }
        self.queries.visit(&format!("{p}.queries"), f);
        self.int_branch.visit(&format!("{p}.branch.int"), f);
        self.dir_branch.visit(&format!("{p}.branch.dir"), f);
        self.occ_branch.visit(&format!("{p}.branch.occ"), f);
        self.heads.visit(&format!("{p}.head"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.projection.visit_mut(&format!("{p}.projection"), f);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("{p}.encoder.{i}"), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("{p}.decoder.{i}"), f);
        }
        self.queries.visit_mut(&format!("{p}.queries"), f);
        self.int_branch.visit_mut(&format!("{p}.branch.int"), f);
        self.dir_branch.visit_mut(&format!("{p}.branch.dir"), f);
        self.occ_branch.visit_mut(&format!("{p}.branch.occ"), f);
        self.heads.visit_mut(&format!("{p}.head"), f);
    }
}

/// Per-view angular sectors: front, left, back, right.
fn view_of(x: f64, y: f64, views: usize) -> (usize, f64) {
    let sector = std::f64::consts::TAU / views as f64;
    // Rotate so the front sector is centred on +x.
    let angle = (y.atan2(x) + sector / 2.0).rem_euclid(std::f64::consts::TAU);
    let view = ((angle / sector) as usize).min(views - 1);
    (view, (angle - view as f64 * sector) / sector)
}

/// Rasterizes lane geometry and attributes into `views` grids of shape
/// `E x H x W`. The background and the attribute-to-channel projection are
/// both derived from `seed`, so equal inputs give bit-identical grids.
pub fn synthetic_features(scene: &SceneAnnotation, cfg: &NetConfig, seed: u64) -> Vec<Tensor> {
    let (e, h, w) = (cfg.embed_dim, cfg.grid_h, cfg.grid_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut grids: Vec<Tensor> = (0..cfg.views)
        .map(|_| Tensor::from_fn(&[e, h, w], |_| rng.random_range(-0.1..0.1)))
        .collect();
    const ATTRS: usize = 6;
    let proj: Vec<f64> = (0..e * ATTRS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let max_range = BEV_RANGE * std::f64::consts::SQRT_2;
    for lane in &scene.lanes {
        for p in lane.points() {
            let (view, frac) = view_of(p.x, p.y, cfg.views);
            let range = p.x.hypot(p.y).min(max_range - 1e-9);
            let row = ((range / max_range) * h as f64) as usize;
            let col = ((frac * w as f64) as usize).min(w - 1);
            let attrs = [
                1.0,
                lane.intersection as f64,
                lane.direction as f64,
                p.occ as f64,
                p.x / BEV_RANGE,
                p.y / BEV_RANGE,
            ];
            let grid = grids[view].data_mut();
            for c in 0..e {
                let v: f64 = (0..ATTRS).map(|a| proj[c * ATTRS + a] * attrs[a]).sum();
                grid[(c * h + row) * w + col] += v;
            }
        }
    }
    grids
}

impl PerceptionNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let e = config.embed_dim;
        let mut init = Init::new(seed, e);
        Ok(Self {
            projection: Linear::new(&mut init, e, e),
            encoder: (0..config.layers).map(|_| EncoderLayer::new(&mut init, &config)).collect(),
            decoder: (0..config.layers).map(|_| DecoderLayer::new(&mut init, &config)).collect(),
            queries: QuerySet {
                double_edge: init.uniform(&[e, config.lane_points()]),
                speed: init.uniform(&[e, 1]),
                signal: init.uniform(&[e, 1]),
            },
            int_branch: Mlp::new(&mut init, e, config.hidden, e),
            dir_branch: Mlp::new(&mut init, e, config.hidden, e),
            occ_branch: Mlp::new(&mut init, e, config.hidden, e),
            heads: Heads {
                bev: Mlp::new(&mut init, e, config.hidden, 2),
                int: Linear::new(&mut init, e, 1),
                dir: Linear::new(&mut init, e, 1),
                occ: Linear::new(&mut init, e, 1),
                speed: Linear::new(&mut init, e, 1),
                signal: Linear::new(&mut init, e, 4),
            },
            config,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn set_projection(&mut self, projection: Linear) {
        assert_eq!(projection.weight.shape(), self.projection.weight.shape());
        self.projection = projection;
    }

    /// Per-view 1x1 projection, flatten, add the positional encoding, and
    /// concatenate views in order. The projection is shared by all views.
    pub fn tokenize(&self, grids: &[Tensor]) -> Result<Tensor, NetError> {
        let cfg = &self.config;
        let (e, hw) = (cfg.embed_dim, cfg.grid_h * cfg.grid_w);
        if grids.len() != cfg.views {
            return Err(NetError::Config(format!("expected {} views, got {}", cfg.views, grids.len())));
        }
        let pe = sinusoidal_pe(cfg.grid_h, cfg.grid_w, e)?;
        let mut per_view = Vec::with_capacity(grids.len());
        for g in grids {
            if g.shape() != [e, cfg.grid_h, cfg.grid_w] {
                return Err(TensorError::ShapeMismatch {
                    op: "tokenize",
                    left: g.shape().to_vec(),
                    right: vec![e, cfg.grid_h, cfg.grid_w],
                }
                .into());
            }
            let z = self.projection.forward(&g.reshape(&[e, hw])?);
            per_view.push(z.add(&pe)?);
        }
        Ok(Tensor::hcat(&per_view.iter().collect::<Vec<_>>())?)
    }

    pub fn encode(&self, tokens: &Tensor, mut stats: Option<&mut AttentionStats>) -> Tensor {
        self.encoder
            .iter()
            .fold(tokens.clone(), |x, layer| layer.forward(&x, stats.as_deref_mut()))
    }

    /// Runs the query decoder; returns the feature bundle plus the speed and
    /// signal query states (`E x 1` each).
    pub fn decode(&self, memory: &Tensor, mut stats: Option<&mut AttentionStats>) -> (FeatureBundle, Tensor, Tensor) {
        let cfg = &self.config;
        let (e, nd, np, n) = (cfg.embed_dim, cfg.lanes, cfg.points, cfg.lane_points());
        let q0 = Tensor::hcat(&[&self.queries.double_edge, &self.queries.speed, &self.queries.signal])
            .expect("query widths");
        let q = self
            .decoder
            .iter()
            .fold(q0, |q, layer| layer.forward(&q, memory, stats.as_deref_mut()));
        let lanes_flat = q.columns(0, n);
        let speed = q.columns(n, n + 1);
        let signal = q.columns(n + 1, n + 2);
        let double_edge = lanes_flat.reshape(&[e, nd, np]).expect("lane layout");
        let pooled = double_edge.mean_last();
        let bundle = FeatureBundle {
            int: self.int_branch.forward(&pooled),
            dir: self.dir_branch.forward(&pooled),
            occ: self.occ_branch.forward(&lanes_flat).reshape(&[e, nd, np]).expect("occ layout"),
            double_edge,
        };
        (bundle, speed, signal)
    }

    pub fn heads(&self, bundle: &FeatureBundle, speed: &Tensor, signal: &Tensor) -> PerceptionOutput {
        let cfg = &self.config;
        let (e, nd, np) = (cfg.embed_dim, cfg.lanes, cfg.points);
        let flat = |t: &Tensor| t.reshape(&[e, nd * np]).expect("flatten");
        let bev = self
            .heads
            .bev
            .forward(&flat(&bundle.double_edge))
            .t()
            .map(|v| BEV_RANGE * v.tanh())
            .reshape(&[nd, np, 2])
            .expect("bev layout");
        let prob = |lin: &Linear, x: &Tensor, shape: &[usize]| {
            lin.forward(x).map(sigmoid).reshape(shape).expect("prob layout")
        };
        PerceptionOutput {
            points: bev,
            p_int: prob(&self.heads.int, &bundle.int, &[nd, 1]),
            p_dir: prob(&self.heads.dir, &bundle.dir, &[nd, 1]),
            p_occ: prob(&self.heads.occ, &flat(&bundle.occ), &[nd, np, 1]),
            speed: softplus(self.heads.speed.forward(speed).data()[0]),
            signal_logits: self.heads.signal.forward(signal).reshape(&[4]).expect("signal layout"),
        }
    }

    /// Synthetic features through heads; also returns the feature bundle for
    /// the fusion and planning stages.
    pub fn forward(&self, scene: &SceneAnnotation, seed: u64) -> Result<(PerceptionOutput, FeatureBundle), NetError> {
        let grids = synthetic_features(scene, &self.config, seed);
        let tokens = self.tokenize(&grids)?;
        let memory = self.encode(&tokens, None);
        let (bundle, speed, signal) = self.decode(&memory, None);
        Ok((self.heads(&bundle, &speed, &signal), bundle))
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::default();
        self.export("net", &mut store);
        store
    }

    pub fn load_store(&mut self, store: &ParamStore) -> Result<(), NetError> {
        Ok(self.import("net", store)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::straight_lane;
    use crate::scene::Signal;

    fn scene() -> SceneAnnotation {
        let mut lane = straight_lane(2, 1, 1);
        lane.points_mut().for_each(|p| p.x += 3.0);
        SceneAnnotation {
            lanes: vec![lane],
            speed: 5.0,
            signal: Signal::Green,
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::reference().validate().is_ok());
        assert!(NetConfig::small().validate().is_ok());
        let bad = NetConfig { points: 5, ..NetConfig::small() };
        assert!(bad.validate().is_err());
        let bad = NetConfig { heads: 3, ..NetConfig::small() };
        assert!(bad.validate().is_err());
        let bad = NetConfig { embed_dim: 18, heads: 2, ..NetConfig::small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn features_are_deterministic_and_scene_dependent() {
        let cfg = NetConfig::small();
        let a = synthetic_features(&scene(), &cfg, 9);
        assert_eq!(a, synthetic_features(&scene(), &cfg, 9));
        let empty = SceneAnnotation::empty(5.0, Signal::Green);
        let bg = synthetic_features(&empty, &cfg, 9);
        assert_ne!(a, bg);
        assert!(bg.iter().all(|g| g.data().iter().all(|v| v.abs() < 0.1)));
        let mut moved = scene();
        moved.lanes[0].left.points[1].occ = 0;
        assert_ne!(a, synthetic_features(&moved, &cfg, 9));
        assert_eq!(a[0].shape(), &[16, 2, 3]);
    }

    #[test]
    fn zero_grids_and_projection_give_pe() {
        let cfg = NetConfig::small();
        let mut net = PerceptionNet::new(cfg, 1).unwrap();
        net.set_projection(Linear::zeros(16, 16));
        let grids = vec![Tensor::zeros(&[16, 2, 3]); 4];
        let tokens = net.tokenize(&grids).unwrap();
        assert_eq!(tokens.shape(), &[16, cfg.tokens()]);
        let pe = sinusoidal_pe(2, 3, 16).unwrap();
        for v in 0..4 {
            assert_eq!(tokens.columns(v * 6, v * 6 + 6), pe);
        }
    }

    #[test]
    fn permuting_views_permutes_tokens() {
        let cfg = NetConfig::small();
        let net = PerceptionNet::new(cfg, 2).unwrap();
        let grids = synthetic_features(&scene(), &cfg, 4);
        let swapped = vec![grids[2].clone(), grids[1].clone(), grids[0].clone(), grids[3].clone()];
        let a = net.tokenize(&grids).unwrap();
        let b = net.tokenize(&swapped).unwrap();
        assert_eq!(a.columns(0, 6), b.columns(12, 18));
        assert_eq!(a.columns(12, 18), b.columns(0, 6));
        assert_eq!(a.columns(6, 12), b.columns(6, 12));
        assert!(net.tokenize(&grids[..3]).is_err());
    }

    #[test]
    fn empty_encoder_is_identity_and_shapes_hold() {
        let cfg = NetConfig { layers: 0, ..NetConfig::small() };
        let net = PerceptionNet::new(cfg, 3).unwrap();
        let tokens = net.tokenize(&synthetic_features(&scene(), &cfg, 1)).unwrap();
        assert_eq!(net.encode(&tokens, None), tokens);

        let cfg = NetConfig::small();
        let net = PerceptionNet::new(cfg, 3).unwrap();
        let tokens = net.tokenize(&synthetic_features(&scene(), &cfg, 1)).unwrap();
        let mut stats = AttentionStats::default();
        let memory = net.encode(&tokens, Some(&mut stats));
        assert_eq!(memory.shape(), tokens.shape());
        let (bundle, speed, signal) = net.decode(&memory, Some(&mut stats));
        assert!(stats.max_row_sum_error < 1e-6);
        // encoder: layers * heads * tokens rows; decoder adds self + cross.
        let q = cfg.lane_points() + 2;
        assert_eq!(stats.rows, cfg.layers * cfg.heads * (cfg.tokens() + 2 * q));
        assert_eq!(bundle.double_edge.shape(), &[16, 3, 4]);
        assert_eq!(bundle.int.shape(), &[16, 3]);
        assert_eq!(bundle.dir.shape(), &[16, 3]);
        assert_eq!(bundle.occ.shape(), &[16, 3, 4]);
        assert_eq!(speed.shape(), &[16, 1]);
        assert_eq!(signal.shape(), &[16, 1]);
    }

    #[test]
    fn tied_lane_queries_give_equivariant_outputs() {
        let cfg = NetConfig::small();
        let mut net = PerceptionNet::new(cfg, 5).unwrap();
        // Lanes 0 and 2 share identical query values.
        let np = cfg.points;
        let q = &mut net.queries.double_edge;
        for r in 0..cfg.embed_dim {
            for p in 0..np {
                let v = q.get(&[r, p]);
                q.set(&[r, 2 * np + p], v);
            }
        }
        let tokens = net.tokenize(&synthetic_features(&scene(), &cfg, 1)).unwrap();
        let memory = net.encode(&tokens, None);
        let (bundle, _, _) = net.decode(&memory, None);
        for r in 0..cfg.embed_dim {
            assert_eq!(bundle.int.get(&[r, 0]), bundle.int.get(&[r, 2]));
            for p in 0..np {
                assert_eq!(bundle.double_edge.get(&[r, 0, p]), bundle.double_edge.get(&[r, 2, p]));
            }
        }
    }

    #[test]
    fn distinct_memories_give_distinct_features() {
        let cfg = NetConfig::small();
        let net = PerceptionNet::new(cfg, 6).unwrap();
        let mut init = Init::new(77, 16);
        let m1 = init.uniform(&[16, 24]);
        let m2 = init.uniform(&[16, 24]);
        assert_ne!(net.decode(&m1, None).0.double_edge, net.decode(&m2, None).0.double_edge);
    }

    #[test]
    fn head_ranges_and_zero_bundle() {
        let cfg = NetConfig::small();
        let mut net = PerceptionNet::new(cfg, 8).unwrap();
        let (out, _) = net.forward(&scene(), 3).unwrap();
        for t in [&out.p_int, &out.p_dir, &out.p_occ] {
            assert!(t.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(out.speed >= 0.0);
        assert_eq!(out.points.shape(), &[3, 4, 2]);
        assert_eq!(out.signal_logits.shape(), &[4]);

        for lin in [&mut net.heads.int, &mut net.heads.dir, &mut net.heads.occ] {
            lin.bias = Tensor::zeros(&[1]);
        }
        let zero = FeatureBundle::zeros(&cfg);
        let z = Tensor::zeros(&[16, 1]);
        let out = net.heads(&zero, &z, &z);
        for t in [&out.p_int, &out.p_dir, &out.p_occ] {
            assert!(t.data().iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn forward_is_deterministic_and_weights_round_trip() {
        let cfg = NetConfig::small();
        let net = PerceptionNet::new(cfg, 10).unwrap();
        let a = net.forward(&scene(), 1).unwrap();
        assert_eq!(a, net.forward(&scene(), 1).unwrap());
        let store = ParamStore::from_json(&net.to_store().to_json()).unwrap();
        let mut other = PerceptionNet::new(cfg, 11).unwrap();
        assert_ne!(other.forward(&scene(), 1).unwrap(), a);
        other.load_store(&store).unwrap();
        assert_eq!(other.forward(&scene(), 1).unwrap(), a);
    }
}
