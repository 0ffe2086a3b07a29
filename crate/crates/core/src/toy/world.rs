//! Synthetic multi-identity world with a shared linear expression basis.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{Pose, POSE_DIM};
use super::render::{render_points, Image};
use super::{ToyError, ToyParams};
use crate::bank::{ExpressionBank, FeatureRecord};
use crate::rng;

const WORLD_STREAM: u64 = 0x574f_524c;
const SPLIT_STREAM: u64 = 0x5350_4c54;

/// Width of the radial bumps around each landmark that shape the basis.
const BASIS_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFrame {
    pub identity_id: String,
    pub frame_id: String,
    pub split: Split,
    pub expression_code: Vec<f64>,
    pub pose_code: Pose,
    pub target_image: Image,
    pub target_points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityShape {
    pub base: Vec<[f64; 2]>,
    pub amplitude: f64,
}

/// Shape of the world generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n_points: usize,
    pub d_e: usize,
    /// Leading code dimensions with full effect; the rest are scaled by `weak_scale`.
    pub strong_dims: usize,
    pub weak_scale: f64,
    /// RMS displacement (scene units) of one unit of a strong code dimension.
    pub amplitude: f64,
    /// Half-width of the lattice the template points are drawn from.
    pub lattice_extent: f64,
    pub grid: usize,
    pub kernel_sigma_px: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_points: 128,
            d_e: 8,
            strong_dims: 4,
            weak_scale: 0.1,
            amplitude: 0.05,
            lattice_extent: 0.85,
            grid: 32,
            kernel_sigma_px: 1.2,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::ConfigInvalid(m.to_string()));
        if self.n_points == 0 || self.d_e == 0 {
            return bad("n_points and d_e must be positive");
        }
        if self.strong_dims > self.d_e {
            return bad("strong_dims exceeds d_e");
        }
        if self.grid < 4 || self.kernel_sigma_px.is_nan() || self.kernel_sigma_px <= 0.0 {
            return bad("grid must be at least 4 and kernel sigma positive");
        }
        if !(self.amplitude.is_finite() && self.weak_scale.is_finite() && self.lattice_extent > 0.0) {
            return bad("amplitude, weak_scale and lattice_extent must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub seed: u64,
    pub landmarks: Vec<[f64; 2]>,
    pub template: Vec<[f64; 2]>,
    /// `basis[(i * 2 + axis) * d_e + j]`: displacement of point `i` along
    /// `axis` per unit of code dimension `j`.
    pub basis: Vec<f64>,
    pub identities: BTreeMap<String, IdentityShape>,
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

impl SyntheticWorld {
    pub fn generate(params: WorldParams, identity_ids: &[String], seed: u64) -> Result<Self, ToyError> {
        params.validate()?;
        let landmarks = ToyParams::default().landmarks;
        let mut r = rng::keyed(seed, &[WORLD_STREAM]);

        let side = (params.n_points as f64).sqrt().ceil() as usize;
        let step = if side > 1 { 2.0 * params.lattice_extent / (side - 1) as f64 } else { 0.0 };
        let mut lattice: Vec<[f64; 2]> = (0..side * side)
            .map(|k| {
                let (row, col) = (k / side, k % side);
                [-params.lattice_extent + col as f64 * step, -params.lattice_extent + row as f64 * step]
            })
            .collect();
        lattice.shuffle(&mut r);
        lattice.truncate(params.n_points);
        let template = lattice;

        let n = params.n_points;
        let d_e = params.d_e;
        let phi: Vec<Vec<f64>> = template
            .iter()
            .map(|p| {
                landmarks
                    .iter()
                    .map(|l| {
                        (-((p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)) / (2.0 * BASIS_WIDTH * BASIS_WIDTH)).exp()
                    })
                    .collect()
            })
            .collect();
        let mut basis = vec![0.0; n * 2 * d_e];
        for j in 0..d_e {
            let mix: Vec<[f64; 2]> = (0..landmarks.len()).map(|_| [normal(&mut r), normal(&mut r)]).collect();
            let field: Vec<[f64; 2]> = phi
                .iter()
                .map(|ph| {
                    let mut v = [0.0; 2];
                    for (w, m) in ph.iter().zip(&mix) {
                        v[0] += w * m[0];
                        v[1] += w * m[1];
                    }
                    v
                })
                .collect();
            let rms = (field.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / n as f64).sqrt();
            let scale =
                params.amplitude * if j < params.strong_dims { 1.0 } else { params.weak_scale } / rms.max(1e-300);
            for (i, v) in field.iter().enumerate() {
                basis[(i * 2) * d_e + j] = scale * v[0];
                basis[(i * 2 + 1) * d_e + j] = scale * v[1];
            }
        }

        let jitter = Normal::new(0.0, 0.04).expect("valid sigma");
        let shift = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut identities = BTreeMap::new();
        for id in identity_ids {
            let a = [
                1.0 + jitter.sample(&mut r),
                jitter.sample(&mut r),
                jitter.sample(&mut r),
                1.0 + jitter.sample(&mut r),
            ];
            let t = [shift.sample(&mut r), shift.sample(&mut r)];
            let base =
                template.iter().map(|p| [a[0] * p[0] + a[1] * p[1] + t[0], a[2] * p[0] + a[3] * p[1] + t[1]]).collect();
            let amplitude = r.random_range(0.8..1.2);
            identities.insert(id.clone(), IdentityShape { base, amplitude });
        }
        Ok(Self { params, seed, landmarks, template, basis, identities })
    }

    pub fn n_points(&self) -> usize {
        self.template.len()
    }

    pub fn d_e(&self) -> usize {
        self.params.d_e
    }

    /// `base + amplitude · Basis · code`, before the rigid pose.
    pub fn expression_points(&self, identity_id: &str, code: &[f64]) -> Result<Vec<[f64; 2]>, ToyError> {
        let shape =
            self.identities.get(identity_id).ok_or_else(|| ToyError::UnknownIdentity(identity_id.to_string()))?;
        let d_e = self.d_e();
        if code.len() != d_e {
            return Err(ToyError::DimensionMismatch { expected: d_e, got: code.len() });
        }
        Ok(shape
            .base
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut p = *b;
                for (a, coord) in p.iter_mut().enumerate() {
                    let row = &self.basis[(i * 2 + a) * d_e..(i * 2 + a + 1) * d_e];
                    *coord += shape.amplitude * row.iter().zip(code).map(|(w, c)| w * c).sum::<f64>();
                }
                p
            })
            .collect())
    }
}

fn apply_pose(points: &mut [[f64; 2]], pose: Pose) {
    let (s, c) = pose[0].sin_cos();
    for p in points.iter_mut() {
        let (x, y) = (p[0], p[1]);
        *p = [c * x - s * y + pose[1], s * x + c * y + pose[2]];
    }
}

/// Renders one frame of `identity_id` with the given codes.
pub fn synth_generate(
    world: &SyntheticWorld,
    identity_id: &str,
    expression_code: &[f64],
    pose_code: Pose,
) -> Result<ToyFrame, ToyError> {
    let mut pts = world.expression_points(identity_id, expression_code)?;
    apply_pose(&mut pts, pose_code);
    Ok(ToyFrame {
        identity_id: identity_id.to_string(),
        frame_id: String::new(),
        split: Split::Generated,
        expression_code: expression_code.to_vec(),
        pose_code,
        target_image: render_points(&pts, world.params.grid, world.params.kernel_sigma_px),
        target_points: pts,
    })
}

/// Where the subject's training cluster centers may lie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegion {
    /// The whole code cube.
    Full,
    /// First code dimension restricted to `[-1, 0]`.
    HalfCube,
}

/// Sampling design of one experiment. Code dimensions split into "strong"
/// ones (the expression itself) and "style" ones that carry
/// identity-specific habits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldParams,
    pub subject_id: String,
    /// Mixture components of the subject's training expressions.
    pub clusters: usize,
    pub cluster_spread: f64,
    pub train_region: TrainRegion,
    /// Magnitude of the subject's fixed style offset (random sign per style dimension).
    pub subject_style: f64,
    pub subject_style_noise: f64,
    /// Standard deviation of bank identities' style offsets.
    pub bank_style_spread: f64,
    pub bank_frame_noise: f64,
    pub bank_identities: usize,
    pub frames_per_identity: usize,
    pub train_frames: usize,
    pub heldout_frames: usize,
    /// Poses are uniform in `[-pose_range, pose_range]` (angle) and
    /// `[-pose_range/2, pose_range/2]` (translation); zero disables pose.
    pub pose_range: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldParams::default(),
            subject_id: "subject".to_string(),
            clusters: 12,
            cluster_spread: 0.35,
            train_region: TrainRegion::Full,
            subject_style: 0.8,
            subject_style_noise: 0.05,
            bank_style_spread: 0.15,
            bank_frame_noise: 0.1,
            bank_identities: 20,
            frames_per_identity: 200,
            train_frames: 64,
            heldout_frames: 64,
            pose_range: 0.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        self.world.validate()?;
        let bad = |m: &str| Err(ToyError::ConfigInvalid(m.to_string()));
        if self.clusters == 0 || self.bank_identities == 0 || self.frames_per_identity == 0 {
            return bad("clusters, bank_identities and frames_per_identity must be positive");
        }
        if self.train_frames == 0 || self.heldout_frames == 0 {
            return bad("train and heldout frame counts must be positive");
        }
        let spreads = [
            self.cluster_spread,
            self.subject_style,
            self.subject_style_noise,
            self.bank_style_spread,
            self.bank_frame_noise,
            self.pose_range,
        ];
        if spreads.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("spreads and ranges must be finite and nonnegative");
        }
        if self.subject_id.is_empty() || self.bank_ids().contains(&self.subject_id) {
            return bad("subject id must be non-empty and distinct from bank ids");
        }
        Ok(())
    }

    pub fn bank_ids(&self) -> Vec<String> {
        (0..self.bank_identities).map(|k| format!("id{k:03}")).collect()
    }

    pub fn identity_ids(&self) -> Vec<String> {
        let mut ids = vec![self.subject_id.clone()];
        ids.extend(self.bank_ids());
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSplit {
    pub world: SyntheticWorld,
    pub subject_id: String,
    pub train: Vec<ToyFrame>,
    pub bank: ExpressionBank,
    pub heldout: Vec<ToyFrame>,
}

fn clip(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Builds the world and samples the subject's train and heldout frames
/// plus the multi-identity bank.
///
/// Training codes: strong dims from a narrow Gaussian mixture, style dims
/// at the subject's fixed offset. Heldout codes: strong dims uniform on the
/// cube, style dims distributed like the bank population. Bank codes:
/// strong dims uniform, style dims around each identity's own offset.
pub fn make_experiment_split(cfg: &ExperimentConfig) -> Result<ExperimentSplit, ToyError> {
    cfg.validate()?;
    let world = SyntheticWorld::generate(cfg.world.clone(), &cfg.identity_ids(), cfg.seed)?;
    let d_e = cfg.world.d_e;
    let s = cfg.world.strong_dims;
    let mut r = rng::keyed(cfg.seed, &[SPLIT_STREAM]);
    let gauss = |r: &mut ChaCha8Rng, sd: f64| sd * normal(r);

    let pose = |r: &mut ChaCha8Rng| -> Pose {
        if cfg.pose_range == 0.0 {
            return [0.0; POSE_DIM];
        }
        let h = 0.5 * cfg.pose_range;
        [r.random_range(-cfg.pose_range..=cfg.pose_range), r.random_range(-h..=h), r.random_range(-h..=h)]
    };
    let first_dim_hi = match cfg.train_region {
        TrainRegion::Full => 1.0,
        TrainRegion::HalfCube => 0.0,
    };

    let centers: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| {
            (0..s)
                .map(|j| if j == 0 { r.random_range(-1.0..=first_dim_hi) } else { r.random_range(-1.0..=1.0) })
                .collect()
        })
        .collect();
    let style: Vec<f64> =
        (s..d_e).map(|_| if r.random_bool(0.5) { cfg.subject_style } else { -cfg.subject_style }).collect();

    let mut train = Vec::with_capacity(cfg.train_frames);
    for t in 0..cfg.train_frames {
        let c = &centers[r.random_range(0..cfg.clusters)];
        let mut code: Vec<f64> = c.iter().map(|&m| clip(m + gauss(&mut r, cfg.cluster_spread))).collect();
        if s > 0 {
            code[0] = code[0].min(first_dim_hi);
        }
        code.extend(style.iter().map(|&m| clip(m + gauss(&mut r, cfg.subject_style_noise))));
        let p = pose(&mut r);
        let mut f = synth_generate(&world, &cfg.subject_id, &code, p)?;
        f.frame_id = format!("t{t:04}");
        f.split = Split::Train;
        train.push(f);
    }

    let heldout_style_sd = cfg.bank_style_spread.hypot(cfg.bank_frame_noise);
    let mut heldout = Vec::with_capacity(cfg.heldout_frames);
    for h in 0..cfg.heldout_frames {
        let mut code: Vec<f64> = (0..s).map(|_| r.random_range(-1.0..=1.0)).collect();
        code.extend((s..d_e).map(|_| clip(gauss(&mut r, heldout_style_sd))));
        let p = pose(&mut r);
        let mut f = synth_generate(&world, &cfg.subject_id, &code, p)?;
        f.frame_id = format!("h{h:04}");
        f.split = Split::Heldout;
        heldout.push(f);
    }

    let mut records = Vec::with_capacity(cfg.bank_identities * cfg.frames_per_identity);
    for id in cfg.bank_ids() {
        let offset: Vec<f64> = (s..d_e).map(|_| gauss(&mut r, cfg.bank_style_spread)).collect();
        for k in 0..cfg.frames_per_identity {
            let mut code: Vec<f64> = (0..s).map(|_| r.random_range(-1.0..=1.0)).collect();
            code.extend(offset.iter().map(|&m| clip(m + gauss(&mut r, cfg.bank_frame_noise))));
            records.push(FeatureRecord::new(id.clone(), format!("f{k:04}"), code));
        }
    }
    let bank = ExpressionBank::ingest_records(records, d_e)?;

    Ok(ExperimentSplit { world, subject_id: cfg.subject_id.clone(), train, bank, heldout })
}
