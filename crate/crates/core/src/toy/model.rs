//! Canonical points, deformation MLPs and their batched forward/backward
//! passes.
//!
//! A frame deforms every canonical point as
//! `x_i = x⁰_i + w_i·f_exp(g_i, e) + (1 − w_i)·f_pose(g_i, p)`, where `w_i`
//! decays with the distance from `x⁰_i` to the nearest landmark.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::linalg::{gemm, MatRef};

/// Rotation angle (radians) followed by a 2-D translation.
pub type Pose = [f64; 3];

pub const POSE_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Makes the whole network linear; used by gradient checks.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

/// Two hidden layers of equal width and a 2-D output. Weight matrices are
/// row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            input,
            hidden,
            activation,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; 2 * hidden],
            b3: vec![0.0; 2],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` for every weight and bias; the output layer
    /// is further multiplied by `output_scale`.
    pub fn init<R: Rng>(input: usize, hidden: usize, activation: Activation, output_scale: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(input, hidden, activation);
        let mut fill = |v: &mut [f64], fan_in: usize, scale: f64| {
            let k = 1.0 / (fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = scale * rng.random_range(-k..k));
        };
        fill(&mut m.w1, input, 1.0);
        fill(&mut m.b1, input, 1.0);
        fill(&mut m.w2, hidden, 1.0);
        fill(&mut m.b2, hidden, 1.0);
        fill(&mut m.w3, hidden, output_scale);
        fill(&mut m.b3, hidden, output_scale);
        m
    }

    fn blocks(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Unbatched reference evaluation.
    pub fn forward_single(&self, x: &[f64]) -> [f64; 2] {
        let h = self.hidden;
        let act = self.activation;
        let h1: Vec<f64> = (0..h)
            .map(|j| act.apply(self.b1[j] + (0..self.input).map(|k| self.w1[j * self.input + k] * x[k]).sum::<f64>()))
            .collect();
        let h2: Vec<f64> =
            (0..h).map(|j| act.apply(self.b2[j] + (0..h).map(|k| self.w2[j * h + k] * h1[k]).sum::<f64>())).collect();
        let o = |r: usize| self.b3[r] + (0..h).map(|k| self.w3[r * h + k] * h2[k]).sum::<f64>();
        [o(0), o(1)]
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Activations of one MLP evaluated on `conds.len() × n` rows, row
/// `c * n + i` pairing condition `c` with point `i`.
struct MlpPass {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn mlp_forward(mlp: &Mlp, feats: &[f64], n: usize, dg: usize, conds: &[&[f64]]) -> MlpPass {
    let h = mlp.hidden;
    let din = mlp.input;
    let rows = conds.len() * n;
    let act = mlp.activation;

    // The first layer splits into a per-point part and a per-condition part.
    let mut point_part = vec![0.0; n * h];
    let w1g = MatRef { data: &mlp.w1, rows: h, cols: dg, rs: din, cs: 1 };
    gemm(MatRef::row_major(feats, n, dg), w1g.t(), 0.0, &mut point_part);
    let mut h1 = vec![0.0; rows * h];
    for (c, cond) in conds.iter().enumerate() {
        let cond_part: Vec<f64> = (0..h)
            .map(|j| mlp.b1[j] + cond.iter().enumerate().map(|(k, v)| mlp.w1[j * din + dg + k] * v).sum::<f64>())
            .collect();
        let block = &mut h1[c * n * h..(c + 1) * n * h];
        for i in 0..n {
            for j in 0..h {
                block[i * h + j] = act.apply(point_part[i * h + j] + cond_part[j]);
            }
        }
    }
    let mut h2 = vec![0.0; rows * h];
    for r in 0..rows {
        h2[r * h..(r + 1) * h].copy_from_slice(&mlp.b2);
    }
    gemm(MatRef::row_major(&h1, rows, h), MatRef::row_major(&mlp.w2, h, h).t(), 1.0, &mut h2);
    h2.iter_mut().for_each(|v| *v = act.apply(*v));
    let mut out = vec![0.0; rows * 2];
    for r in 0..rows {
        out[r * 2..r * 2 + 2].copy_from_slice(&mlp.b3);
    }
    gemm(MatRef::row_major(&h2, rows, h), MatRef::row_major(&mlp.w3, 2, h).t(), 1.0, &mut out);
    MlpPass { h1, h2, out }
}

/// Accumulates parameter gradients into `grad` and feature gradients into
/// `d_feats`, given `d_out` (rows × 2).
#[allow(clippy::too_many_arguments)]
fn mlp_backward(
    mlp: &Mlp,
    feats: &[f64],
    n: usize,
    dg: usize,
    conds: &[&[f64]],
    pass: &MlpPass,
    d_out: &[f64],
    grad: &mut Mlp,
    d_feats: &mut [f64],
) {
    let h = mlp.hidden;
    let din = mlp.input;
    let rows = conds.len() * n;
    let act = mlp.activation;

    gemm(MatRef::row_major(d_out, rows, 2).t(), MatRef::row_major(&pass.h2, rows, h), 1.0, &mut grad.w3);
    for r in 0..rows {
        grad.b3[0] += d_out[2 * r];
        grad.b3[1] += d_out[2 * r + 1];
    }
    let mut dz2 = vec![0.0; rows * h];
    gemm(MatRef::row_major(d_out, rows, 2), MatRef::row_major(&mlp.w3, 2, h), 0.0, &mut dz2);
    for (d, &o) in dz2.iter_mut().zip(&pass.h2) {
        *d *= act.grad_from_output(o);
    }
    gemm(MatRef::row_major(&dz2, rows, h).t(), MatRef::row_major(&pass.h1, rows, h), 1.0, &mut grad.w2);
    for r in 0..rows {
        for j in 0..h {
            grad.b2[j] += dz2[r * h + j];
        }
    }
    let mut dz1 = vec![0.0; rows * h];
    gemm(MatRef::row_major(&dz2, rows, h), MatRef::row_major(&mlp.w2, h, h), 0.0, &mut dz1);
    for (d, &o) in dz1.iter_mut().zip(&pass.h1) {
        *d *= act.grad_from_output(o);
    }

    // Reduce over conditions (per point) and over points (per condition).
    let mut per_point = vec![0.0; n * h];
    let mut per_cond = vec![0.0; conds.len() * h];
    for c in 0..conds.len() {
        for i in 0..n {
            let row = &dz1[(c * n + i) * h..(c * n + i + 1) * h];
            for j in 0..h {
                per_point[i * h + j] += row[j];
                per_cond[c * h + j] += row[j];
            }
        }
    }
    for (c, cond) in conds.iter().enumerate() {
        for j in 0..h {
            let d = per_cond[c * h + j];
            grad.b1[j] += d;
            for (k, v) in cond.iter().enumerate() {
                grad.w1[j * din + dg + k] += d * v;
            }
        }
    }
    let mut dw1g = vec![0.0; h * dg];
    gemm(MatRef::row_major(&per_point, n, h).t(), MatRef::row_major(feats, n, dg), 0.0, &mut dw1g);
    for j in 0..h {
        for k in 0..dg {
            grad.w1[j * din + k] += dw1g[j * dg + k];
        }
    }
    let w1g = MatRef { data: &mlp.w1, rows: h, cols: dg, rs: din, cs: 1 };
    gemm(MatRef::row_major(&per_point, n, h), w1g, 1.0, d_feats);
}

/// Canonical positions, per-point features (row-major `n × d_g`) and the
/// fixed landmark positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPointSet {
    pub points: Vec<[f64; 2]>,
    pub d_g: usize,
    pub features: Vec<f64>,
    pub landmarks: Vec<[f64; 2]>,
}

impl CanonicalPointSet {
    pub fn new(
        points: Vec<[f64; 2]>,
        d_g: usize,
        features: Vec<f64>,
        landmarks: Vec<[f64; 2]>,
    ) -> Result<Self, ToyError> {
        if points.is_empty() || landmarks.is_empty() {
            return Err(ToyError::ConfigInvalid("point set needs at least one point and one landmark".into()));
        }
        if features.len() != points.len() * d_g {
            return Err(ToyError::DimensionMismatch { expected: points.len() * d_g, got: features.len() });
        }
        let finite = points.iter().chain(&landmarks).flatten().chain(&features).all(|v| v.is_finite());
        if !finite {
            return Err(ToyError::NonFiniteWeights);
        }
        Ok(Self { points, d_g, features, landmarks })
    }

    /// Feature vectors drawn as `0.1·N(0, 1)`.
    pub fn with_random_features<R: Rng>(
        points: Vec<[f64; 2]>,
        d_g: usize,
        landmarks: Vec<[f64; 2]>,
        rng: &mut R,
    ) -> Result<Self, ToyError> {
        let features = (0..points.len() * d_g).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(points, d_g, features, landmarks)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Index of the nearest landmark and the squared distance to it.
fn nearest_landmark(p: [f64; 2], landmarks: &[[f64; 2]]) -> (usize, f64) {
    landmarks
        .iter()
        .enumerate()
        .map(|(j, l)| (j, (p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// `w_i = exp(−min_j ‖x⁰_i − l_j‖² / τ²)`.
pub fn blend_weights(points: &CanonicalPointSet, tau: f64) -> Vec<f64> {
    points.points.iter().map(|&p| (-nearest_landmark(p, &points.landmarks).1 / (tau * tau)).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationModel {
    pub f_exp: Mlp,
    pub f_pose: Mlp,
    pub tau: f64,
}

impl DeformationModel {
    pub fn zeros(d_g: usize, d_e: usize, hidden: usize, activation: Activation, tau: f64) -> Self {
        Self {
            f_exp: Mlp::zeros(d_g + d_e, hidden, activation),
            f_pose: Mlp::zeros(d_g + POSE_DIM, hidden, activation),
            tau,
        }
    }

    pub fn init<R: Rng>(
        d_g: usize,
        d_e: usize,
        hidden: usize,
        activation: Activation,
        tau: f64,
        output_scale: f64,
        rng: &mut R,
    ) -> Self {
        let f_exp = Mlp::init(d_g + d_e, hidden, activation, output_scale, rng);
        let f_pose = Mlp::init(d_g + POSE_DIM, hidden, activation, output_scale, rng);
        Self { f_exp, f_pose, tau }
    }

    pub fn d_e(&self, d_g: usize) -> usize {
        self.f_exp.input - d_g
    }
}

/// Everything that training updates: both MLPs, point features and
/// canonical positions. Landmarks and `τ` stay fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub model: DeformationModel,
    pub points: CanonicalPointSet,
}

/// Cached forward pass over a batch of frames.
pub struct DeformPass {
    pub positions: Vec<Vec<[f64; 2]>>,
    weights: Vec<f64>,
    nearest: Vec<usize>,
    codes: Vec<Vec<f64>>,
    exp_pass: MlpPass,
    unique_poses: Vec<Vec<f64>>,
    pose_of_frame: Vec<usize>,
    pose_pass: MlpPass,
}

impl ToyState {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn d_e(&self) -> usize {
        self.model.d_e(self.points.d_g)
    }

    pub fn is_finite(&self) -> bool {
        self.model.f_exp.is_finite()
            && self.model.f_pose.is_finite()
            && self.points.points.iter().flatten().chain(&self.points.features).all(|v| v.is_finite())
    }

    /// Deforms the canonical points for each `(code, pose)` pair.
    pub fn forward(&self, codes: &[&[f64]], poses: &[Pose]) -> Result<DeformPass, ToyError> {
        assert_eq!(codes.len(), poses.len());
        let d_e = self.d_e();
        if let Some(bad) = codes.iter().find(|c| c.len() != d_e) {
            return Err(ToyError::DimensionMismatch { expected: d_e, got: bad.len() });
        }
        let n = self.n();
        let dg = self.points.d_g;
        let feats = &self.points.features;
        let (nearest, weights): (Vec<usize>, Vec<f64>) = self
            .points
            .points
            .iter()
            .map(|&p| {
                let (j, d2) = nearest_landmark(p, &self.points.landmarks);
                (j, (-d2 / (self.model.tau * self.model.tau)).exp())
            })
            .unzip();
        let exp_pass = mlp_forward(&self.model.f_exp, feats, n, dg, codes);

        // Frames sharing a pose share one evaluation of the pose network.
        let mut unique_poses: Vec<Vec<f64>> = Vec::new();
        let mut pose_of_frame = Vec::with_capacity(poses.len());
        for p in poses {
            let key = p.to_vec();
            let idx =
                match unique_poses.iter().position(|u| u.iter().zip(&key).all(|(a, b)| a.to_bits() == b.to_bits())) {
                    Some(i) => i,
                    None => {
                        unique_poses.push(key);
                        unique_poses.len() - 1
                    }
                };
            pose_of_frame.push(idx);
        }
        let pose_refs: Vec<&[f64]> = unique_poses.iter().map(Vec::as_slice).collect();
        let pose_pass = mlp_forward(&self.model.f_pose, feats, n, dg, &pose_refs);

        let positions = (0..codes.len())
            .map(|f| {
                let u = pose_of_frame[f];
                (0..n)
                    .map(|i| {
                        let w = weights[i];
                        let x0 = self.points.points[i];
                        let de = &exp_pass.out[(f * n + i) * 2..(f * n + i) * 2 + 2];
                        let dp = &pose_pass.out[(u * n + i) * 2..(u * n + i) * 2 + 2];
                        [x0[0] + w * de[0] + (1.0 - w) * dp[0], x0[1] + w * de[1] + (1.0 - w) * dp[1]]
                    })
                    .collect()
            })
            .collect();
        Ok(DeformPass {
            positions,
            weights,
            nearest,
            codes: codes.iter().map(|c| c.to_vec()).collect(),
            exp_pass,
            unique_poses,
            pose_of_frame,
            pose_pass,
        })
    }

    /// Gradient with respect to every trainable quantity, given the
    /// gradient with respect to each frame's deformed positions.
    pub fn backward(&self, pass: &DeformPass, d_positions: &[Vec<[f64; 2]>]) -> ToyState {
        let n = self.n();
        let dg = self.points.d_g;
        let tau2 = self.model.tau * self.model.tau;
        let mut grad = ToyState {
            model: DeformationModel {
                f_exp: Mlp::zeros(self.model.f_exp.input, self.model.f_exp.hidden, self.model.f_exp.activation),
                f_pose: Mlp::zeros(self.model.f_pose.input, self.model.f_pose.hidden, self.model.f_pose.activation),
                tau: self.model.tau,
            },
            points: CanonicalPointSet {
                points: vec![[0.0; 2]; n],
                d_g: dg,
                features: vec![0.0; n * dg],
                landmarks: self.points.landmarks.clone(),
            },
        };
        let frames = d_positions.len();
        let mut d_exp = vec![0.0; frames * n * 2];
        let mut d_pose = vec![0.0; pass.unique_poses.len() * n * 2];
        for (f, dpos) in d_positions.iter().enumerate() {
            let u = pass.pose_of_frame[f];
            for i in 0..n {
                let w = pass.weights[i];
                let de = &pass.exp_pass.out[(f * n + i) * 2..(f * n + i) * 2 + 2];
                let dp = &pass.pose_pass.out[(u * n + i) * 2..(u * n + i) * 2 + 2];
                let mut dw = 0.0;
                for a in 0..2 {
                    let g = dpos[i][a];
                    d_exp[(f * n + i) * 2 + a] = w * g;
                    d_pose[(u * n + i) * 2 + a] += (1.0 - w) * g;
                    grad.points.points[i][a] += g;
                    dw += g * (de[a] - dp[a]);
                }
                // w = exp(−‖x⁰ − l‖²/τ²) ⇒ ∂w/∂x⁰ = −2w(x⁰ − l)/τ²
                let l = self.points.landmarks[pass.nearest[i]];
                let x0 = self.points.points[i];
                for a in 0..2 {
                    grad.points.points[i][a] += dw * (-2.0 * w * (x0[a] - l[a]) / tau2);
                }
            }
        }
        let codes: Vec<&[f64]> = pass.codes.iter().map(Vec::as_slice).collect();
        mlp_backward(
            &self.model.f_exp,
            &self.points.features,
            n,
            dg,
            &codes,
            &pass.exp_pass,
            &d_exp,
            &mut grad.model.f_exp,
            &mut grad.points.features,
        );
        let poses: Vec<&[f64]> = pass.unique_poses.iter().map(Vec::as_slice).collect();
        mlp_backward(
            &self.model.f_pose,
            &self.points.features,
            n,
            dg,
            &poses,
            &pass.pose_pass,
            &d_pose,
            &mut grad.model.f_pose,
            &mut grad.points.features,
        );
        grad
    }

    /// Parameters in a fixed order: `f_exp`, `f_pose`, features, positions.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.model.f_exp.blocks().into_iter().chain(self.model.f_pose.blocks()) {
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.points.features);
        out.extend(self.points.points.iter().flatten());
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for b in self.model.f_exp.blocks_mut() {
            take(b);
        }
        for b in self.model.f_pose.blocks_mut() {
            take(b);
        }
        take(&mut self.points.features);
        for p in self.points.points.iter_mut() {
            take(p);
        }
    }

    pub fn param_count(&self) -> usize {
        self.model.f_exp.param_count() + self.model.f_pose.param_count() + self.points.features.len() + 2 * self.n()
    }
}

/// Deformed positions for one expression code and pose.
pub fn deform(
    model: &DeformationModel,
    points: &CanonicalPointSet,
    e: &[f64],
    p: Pose,
) -> Result<Vec<[f64; 2]>, ToyError> {
    if !model.f_exp.is_finite() || !model.f_pose.is_finite() {
        return Err(ToyError::NonFiniteWeights);
    }
    let state = ToyState { model: model.clone(), points: points.clone() };
    let pass = state.forward(&[e], &[p])?;
    Ok(pass.positions.into_iter().next().expect("one frame"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn points(n: usize) -> CanonicalPointSet {
        let mut r = rng::keyed(1, &[0]);
        let pts = (0..n).map(|_| [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)]).collect();
        CanonicalPointSet::with_random_features(pts, 3, vec![[0.0, 0.0], [0.5, 0.5]], &mut r).unwrap()
    }

    #[test]
    fn zero_model_is_identity() {
        let pts = points(10);
        let m = DeformationModel::zeros(3, 4, 8, Activation::Tanh, 0.3);
        let out = deform(&m, &pts, &[0.3, -1.0, 0.2, 0.9], [0.4, 0.1, -0.2]).unwrap();
        assert_eq!(out, pts.points);
    }

    #[test]
    fn blend_weight_examples() {
        let pts = CanonicalPointSet::new(vec![[0.5, 0.5], [3.5, 0.5], [0.5, 0.7]], 1, vec![0.0; 3], vec![[0.5, 0.5]])
            .unwrap();
        let w = blend_weights(&pts, 0.3);
        assert_eq!(w[0], 1.0);
        assert!(w[1] < 1e-40);
        assert!(w[2] < 1.0 && w[2] > w[1]);
    }

    #[test]
    fn batched_matches_single() {
        let pts = points(7);
        let mut r = rng::keyed(2, &[0]);
        let m = DeformationModel::init(3, 4, 16, Activation::Tanh, 0.3, 1.0, &mut r);
        let e = [0.1, 0.2, -0.3, 0.5];
        let p = [0.05, 0.1, 0.0];
        let out = deform(&m, &pts, &e, p).unwrap();
        let w = blend_weights(&pts, 0.3);
        for i in 0..7 {
            let g = &pts.features[i * 3..i * 3 + 3];
            let xe: Vec<f64> = g.iter().chain(&e).copied().collect();
            let xp: Vec<f64> = g.iter().chain(&p).copied().collect();
            let de = m.f_exp.forward_single(&xe);
            let dp = m.f_pose.forward_single(&xp);
            for a in 0..2 {
                let want = pts.points[i][a] + w[i] * de[a] + (1.0 - w[i]) * dp[a];
                assert!((out[i][a] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let pts = points(5);
        let mut r = rng::keyed(3, &[0]);
        let s = ToyState { model: DeformationModel::init(3, 2, 4, Activation::Tanh, 0.3, 0.1, &mut r), points: pts };
        let flat = s.flatten();
        assert_eq!(flat.len(), s.param_count());
        let mut t = s.clone();
        t.unflatten(&vec![0.0; flat.len()]);
        t.unflatten(&flat);
        assert_eq!(s, t);
    }
}
