//! Hierarchical early fusion of lane attributes into the planning feature.

use crate::nn::Module;
use crate::perception::FeatureBundle;
use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub gamma: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { gamma: 0.0 }
    }
}

fn check_rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [e, nd, np] => Ok((e, nd, np)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0, 0],
        }),
    }
}

/// Repeats every lane column across its `points` slots.
pub fn expand_lane_attrs(f_int: &Tensor, f_dir: &Tensor, points: usize) -> Result<(Tensor, Tensor)> {
    if f_int.shape() != f_dir.shape() || f_int.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "expand_lane_attrs",
            left: f_int.shape().to_vec(),
            right: f_dir.shape().to_vec(),
        });
    }
    let (e, nd) = f_int.dims2();
    let expand = |t: &Tensor| Tensor::from_fn(&[e, nd, points], |i| t.data()[i / points]);
    Ok((expand(f_int), expand(f_dir)))
}

/// `R(f_int)^T R(f_dir)` over flattened lane points.
pub fn int2dir(f_int_exp: &Tensor, f_dir_exp: &Tensor) -> Result<Tensor> {
    let (e, nd, np) = check_rank3("int2dir", f_int_exp)?;
    if f_dir_exp.shape() != f_int_exp.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "int2dir",
            left: f_int_exp.shape().to_vec(),
            right: f_dir_exp.shape().to_vec(),
        });
    }
    let n = nd * np;
    f_int_exp.reshape(&[e, n])?.t().matmul(&f_dir_exp.reshape(&[e, n])?)
}

/// Row-softmax of `m` used as attention over occupancy columns: output
/// column `a` is `sum_b softmax(m)[a, b] * f_occ[:, b]`.
pub fn fuse_occupancy(f_occ: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (e, nd, np) = check_rank3("fuse_occupancy", f_occ)?;
    let n = nd * np;
    if m.shape() != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_occupancy",
            left: f_occ.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    let weights = m.softmax(1)?;
    f_occ.reshape(&[e, n])?.matmul(&weights.t())
}

pub fn blend(f_fusion: &Tensor, f_double_edge: &Tensor, gamma: f64) -> Result<Tensor> {
    let (e, nd, np) = check_rank3("blend", f_double_edge)?;
    let fused = f_fusion.reshape(&[e, nd, np])?;
    fused.scale(gamma).add(f_double_edge)
}

/// Full fusion stage: bundle to planning feature `E x N_d x N_p`.
pub fn fuse(bundle: &FeatureBundle, params: FusionParams) -> Result<Tensor> {
    let (_, _, np) = check_rank3("fuse", &bundle.double_edge)?;
    let (i, d) = expand_lane_attrs(&bundle.int, &bundle.dir, np)?;
    let m = int2dir(&i, &d)?;
    let f_fusion = fuse_occupancy(&bundle.occ, &m)?;
    blend(&f_fusion, &bundle.double_edge, params.gamma)
}

/// Stores `gamma` as a one-element tensor so it travels with the weights.
#[derive(Debug, Clone)]
pub struct FusionModule {
    gamma: Tensor,
}

impl FusionModule {
    pub fn new(params: FusionParams) -> Self {
        Self {
            gamma: Tensor::filled(&[1], params.gamma),
        }
    }

    pub fn params(&self) -> FusionParams {
        FusionParams { gamma: self.gamma.data()[0] }
    }
}

impl Module for FusionModule {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
    }
}
