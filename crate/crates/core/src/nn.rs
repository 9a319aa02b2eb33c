//! Transformer building blocks over channel-major (`E x tokens`) tensors.

use crate::tensor::{softmax_slice, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected parameter `{0}`")]
    Unexpected(String),
    #[error("weight file: {0}")]
    Io(#[from] std::io::Error),
    #[error("weight file JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Deterministic uniform initializer.
pub struct Init {
    rng: ChaCha8Rng,
    bound: f64,
}

impl Init {
    /// Uniform in `(-1/sqrt(dim), 1/sqrt(dim))`.
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: 1.0 / (dim as f64).sqrt(),
        }
    }

    pub fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let b = self.bound;
        Tensor::from_fn(shape, |_| self.rng.random_range(-b..b))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Flat name -> tensor map, the on-disk weight format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, StoredTensor> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.as_str(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_string(&map).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, WeightError> {
        let map: BTreeMap<String, StoredTensor> = serde_json::from_str(text)?;
        let mut store = ParamStore::default();
        for (k, st) in map {
            store.insert(k, Tensor::new(st.shape, st.data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WeightError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Anything owning named parameters.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn export(&self, prefix: &str, store: &mut ParamStore) {
        self.visit(prefix, &mut |name, t| store.insert(name, t.clone()));
    }

    /// Overwrites every parameter from `store`; shapes must match.
    fn import(&mut self, prefix: &str, store: &ParamStore) -> Result<(), WeightError> {
        let mut err = None;
        self.visit_mut(prefix, &mut |name, slot| {
            if err.is_some() {
                return;
            }
            match store.get(&name) {
                None => err = Some(WeightError::Missing(name)),
                Some(t) if t.shape() != slot.shape() => {
                    err = Some(WeightError::Shape {
                        name,
                        expected: slot.shape().to_vec(),
                        actual: t.shape().to_vec(),
                    })
                }
                Some(t) => *slot = t.clone(),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: init.uniform(&[outputs, inputs]),
            bias: init.uniform(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.weight.matmul(x).expect("linear: input width");
        y.add_row_bias(self.bias.data());
        y
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Normalizes each token (column) over the channel axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (rows, cols) = x.dims2();
        let data = x.data();
        let mut mean = vec![0.0; cols];
        for row in data.chunks(cols) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for row in data.chunks(cols) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / rows as f64 + LN_EPS).sqrt())
            .collect();
        let mut out = x.clone();
        let (g, b) = (self.gamma.data(), self.beta.data());
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            for c in 0..cols {
                row[c] = (row[c] - mean[c]) * inv[c] * g[r] + b[r];
            }
        }
        out
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            fc1: Linear::new(init, inputs, hidden),
            fc2: Linear::new(init, hidden, outputs),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.fc1.forward(x).map(|v| v.max(0.0));
        self.fc2.forward(&h)
    }
}

impl Module for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Running summary of every attention distribution produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    pub rows: usize,
    pub max_row_sum_error: f64,
    pub min_weight: f64,
}

impl Default for AttentionStats {
    fn default() -> Self {
        Self {
            rows: 0,
            max_row_sum_error: 0.0,
            min_weight: f64::INFINITY,
        }
    }
}

impl AttentionStats {
    fn record(&mut self, row: &[f64]) {
        self.rows += 1;
        let sum: f64 = row.iter().sum();
        self.max_row_sum_error = self.max_row_sum_error.max((sum - 1.0).abs());
        self.min_weight = row.iter().copied().fold(self.min_weight, f64::min);
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            q: Linear::new(init, dim, dim),
            k: Linear::new(init, dim, dim),
            v: Linear::new(init, dim, dim),
            out: Linear::new(init, dim, dim),
        }
    }

    /// `query` is `E x Tq`, `context` is `E x Tk`; returns `E x Tq`.
    pub fn forward(&self, query: &Tensor, context: &Tensor, stats: Option<&mut AttentionStats>) -> Tensor {
        let q = self.q.forward(query);
        let k = self.k.forward(context);
        let v = self.v.forward(context);
        let (dim, tq) = q.dims2();
        let tk = k.dims2().1;
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qt = q.t();
        let mut ctx = Vec::with_capacity(dim * tq);
        let mut stats = stats;
        for h in 0..self.heads {
            let rows = h * d..(h + 1) * d;
            let q_h = qt.columns(rows.start, rows.end).scale(scale);
            let k_h = Tensor::new(vec![d, tk], k.data()[rows.start * tk..rows.end * tk].to_vec())
                .expect("head slice");
            let v_h = Tensor::new(vec![d, tk], v.data()[rows.start * tk..rows.end * tk].to_vec())
                .expect("head slice");
            let mut scores = q_h.matmul(&k_h).expect("scores");
            for row in scores.data_mut().chunks_mut(tk) {
                softmax_slice(row);
                if let Some(s) = stats.as_deref_mut() {
                    s.record(row);
                }
            }
            let ctx_h = v_h.matmul(&scores.t()).expect("context");
            ctx.extend_from_slice(ctx_h.data());
        }
        let ctx = Tensor::new(vec![dim, tq], ctx).expect("context shape");
        self.out.forward(&ctx)
    }
}

impl Module for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_distributions() {
        let mut init = Init::new(3, 16);
        let mha = MultiHeadAttention::new(&mut init, 16, 4);
        let q = init.uniform(&[16, 5]).scale(10.0);
        let kv = init.uniform(&[16, 7]).scale(10.0);
        let mut stats = AttentionStats::default();
        let out = mha.forward(&q, &kv, Some(&mut stats));
        assert_eq!(out.shape(), &[16, 5]);
        assert_eq!(stats.rows, 4 * 5);
        assert!(stats.max_row_sum_error < 1e-12);
        assert!(stats.min_weight >= 0.0);
    }

    /// Per-head attention written out with explicit loops.
    #[test]
    fn attention_matches_loop_reference() {
        let mut init = Init::new(11, 8);
        let mha = MultiHeadAttention::new(&mut init, 8, 2);
        let x = init.uniform(&[8, 3]);
        let c = init.uniform(&[8, 4]);
        let (q, k, v) = (mha.q.forward(&x), mha.k.forward(&c), mha.v.forward(&c));
        let mut ctx = Tensor::zeros(&[8, 3]);
        for h in 0..2 {
            for i in 0..3 {
                let mut w: Vec<f64> = (0..4)
                    .map(|j| (0..4).map(|r| q.get(&[h * 4 + r, i]) * k.get(&[h * 4 + r, j])).sum::<f64>() / 2.0)
                    .collect();
                softmax_slice(&mut w);
                for r in 0..4 {
                    let val: f64 = (0..4).map(|j| w[j] * v.get(&[h * 4 + r, j])).sum();
                    ctx.set(&[h * 4 + r, i], val);
                }
            }
        }
        let expect = mha.out.forward(&ctx);
        assert!(mha.forward(&x, &c, None).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn layer_norm_centres_columns() {
        let x = Tensor::from_fn(&[6, 3], |i| (i * i) as f64 * 0.1);
        let y = LayerNorm::new(6).forward(&x);
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| y.get(&[r, c])).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn store_round_trip_and_import_checks() {
        let mut init = Init::new(5, 4);
        let mlp = Mlp::new(&mut init, 4, 3, 2);
        let mut store = ParamStore::default();
        mlp.export("m", &mut store);
        assert_eq!(store.names().collect::<Vec<_>>(), ["m.fc1.bias", "m.fc1.weight", "m.fc2.bias", "m.fc2.weight"]);
        let back = ParamStore::from_json(&store.to_json()).unwrap();
        assert_eq!(back, store);

        let mut other = Mlp::new(&mut Init::new(6, 4), 4, 3, 2);
        other.import("m", &back).unwrap();
        let x = Tensor::filled(&[4, 1], 0.5);
        assert_eq!(other.forward(&x), mlp.forward(&x));

        let mut wrong = Mlp::new(&mut Init::new(6, 4), 4, 5, 2);
        assert!(matches!(wrong.import("m", &back), Err(WeightError::Shape { .. })));
        assert!(matches!(other.import("x", &back), Err(WeightError::Missing(_))));
    }

    #[test]
    fn scalar_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-50.0) > 0.0);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
    }
}
