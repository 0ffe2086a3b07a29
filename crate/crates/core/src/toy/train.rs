//! Full-batch training, held-out evaluation and finite-difference checks.

use serde::{Deserialize, Serialize};

use super::model::{CanonicalPointSet, DeformationModel, Pose, ToyState};
use super::render::{recon_loss, recon_loss_grad, recon_loss_terms, Image, RenderCache};
use super::world::{Split, ToyFrame};
use super::{ToyError, ToyParams};
use crate::augmentation::{
    make_plan_noise, make_plan_vanilla, AugmentationPlan, FrameRef, LossWeights, PlanFrame, RafPlanner,
};
use crate::bank::FeatureVector;
use crate::retrieval::{Index, SubstituteMode};
use crate::rng;

const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent.
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 3e-3,
            optimizer: Optimizer::Adam,
            schedule: Schedule::Constant,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Where each epoch's conditioning codes come from.
#[derive(Clone, Copy)]
pub enum PlanSource<'a> {
    Vanilla,
    Noise { sigma: f64 },
    Raf { index: &'a Index, p: f64, mode: SubstituteMode },
}

/// Inputs of one optimization step, exposed to observers.
pub struct StepView<'a> {
    pub epoch: usize,
    pub plan: &'a AugmentationPlan,
    pub targets: &'a [&'a Image],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ToyState,
    /// Training loss at the start of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Fresh model: seeded MLP weights, `0.1·N(0,1)` point features and
/// canonical positions at the mean of the training frames' target points.
pub fn init_state(params: &ToyParams, d_e: usize, train: &[ToyFrame], seed: u64) -> Result<ToyState, ToyError> {
    let first = train.first().ok_or_else(|| ToyError::ConfigInvalid("no training frames".into()))?;
    let n = first.target_points.len();
    let mut mean = vec![[0.0; 2]; n];
    for f in train {
        if f.target_points.len() != n {
            return Err(ToyError::DimensionMismatch { expected: n, got: f.target_points.len() });
        }
        for (m, p) in mean.iter_mut().zip(&f.target_points) {
            m[0] += p[0];
            m[1] += p[1];
        }
    }
    let k = train.len() as f64;
    mean.iter_mut().for_each(|m| {
        m[0] /= k;
        m[1] /= k;
    });
    let mut r = rng::keyed(seed, &[INIT_STREAM]);
    let model = DeformationModel::init(
        params.d_g,
        d_e,
        params.hidden,
        params.activation,
        params.tau,
        params.output_init_scale,
        &mut r,
    );
    let points = CanonicalPointSet::with_random_features(mean, params.d_g, params.landmarks.clone(), &mut r)?;
    Ok(ToyState { model, points })
}

/// Summed reconstruction loss over frames and its gradient.
fn loss_and_grad(
    state: &ToyState,
    codes: &[&[f64]],
    poses: &[Pose],
    targets: &[&Image],
    params: &ToyParams,
    weights: &LossWeights,
) -> Result<(f64, ToyState), ToyError> {
    let pass = state.forward(codes, poses)?;
    let mut total = 0.0;
    let mut d_pos = Vec::with_capacity(codes.len());
    for (pos, target) in pass.positions.iter().zip(targets) {
        let cache = RenderCache::new(pos, params.grid, params.kernel_sigma_px);
        let (loss, d_img) = recon_loss_grad(&cache.image, target, weights)?;
        total += loss;
        d_pos.push(cache.backward(pos, &d_img));
    }
    Ok((total, state.backward(&pass, &d_pos)))
}

pub fn train_toy(
    state: ToyState,
    params: &ToyParams,
    frames: &[ToyFrame],
    plan: PlanSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ToyError> {
    train_toy_observed(state, params, frames, plan, cfg, |_| {})
}

/// [`train_toy`] with a callback that sees every step's plan and targets.
pub fn train_toy_observed(
    mut state: ToyState,
    params: &ToyParams,
    frames: &[ToyFrame],
    plan: PlanSource,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepView),
) -> Result<TrainOutcome, ToyError> {
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(ToyError::ConfigInvalid("epochs must be ≥ 1 and learning rate positive".into()));
    }
    if frames.is_empty() {
        return Err(ToyError::ConfigInvalid("no training frames".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.split != Split::Train) {
        return Err(ToyError::NotTrainingFrame(f.frame_id.clone()));
    }
    let plan_frames: Vec<PlanFrame> = frames
        .iter()
        .map(|f| {
            Ok(PlanFrame {
                frame_ref: FrameRef::new(f.identity_id.clone(), f.frame_id.clone()),
                feature: FeatureVector::new(f.expression_code.clone()).ok_or(ToyError::NonFiniteWeights)?,
            })
        })
        .collect::<Result<_, ToyError>>()?;
    let subject = frames[0].identity_id.clone();
    let mut planner = match plan {
        PlanSource::Raf { index, p, mode } => Some(RafPlanner::new(&plan_frames, &subject, index, p, mode, cfg.seed)?),
        _ => None,
    };
    let targets: Vec<&Image> = frames.iter().map(|f| &f.target_image).collect();
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose_code).collect();

    let mut flat = state.flatten();
    let mut m = vec![0.0; flat.len()];
    let mut v = vec![0.0; flat.len()];
    let (b1, b2, eps_adam) = (0.9_f64, 0.999_f64, 1e-8);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_finite = f64::NAN;

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let this_plan = match (&plan, planner.as_mut()) {
            (PlanSource::Raf { .. }, Some(pl)) => pl.plan(e)?,
            (PlanSource::Noise { sigma }, _) => make_plan_noise(&plan_frames, *sigma, e, cfg.seed)?,
            _ => make_plan_vanilla(&plan_frames, e, cfg.seed),
        };
        observe(&StepView { epoch, plan: &this_plan, targets: &targets });
        let codes: Vec<&[f64]> = this_plan.conditioning().map(FeatureVector::as_slice).collect();
        let (loss, grad) = loss_and_grad(&state, &codes, &poses, &targets, params, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(ToyError::DivergedLoss { epoch, loss, last_finite });
        }
        last_finite = loss;
        curve.push(loss);

        let lr = match cfg.schedule {
            Schedule::Constant => cfg.learning_rate,
            Schedule::Cosine => {
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
            }
        };
        let g = grad.flatten();
        match cfg.optimizer {
            Optimizer::Gd => {
                for (x, gi) in flat.iter_mut().zip(&g) {
                    *x -= lr * gi;
                }
            }
            Optimizer::Adam => {
                let t = (epoch + 1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for i in 0..flat.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    flat[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps_adam);
                }
            }
        }
        state.unflatten(&flat);
        if !state.is_finite() {
            return Err(ToyError::DivergedLoss { epoch, loss: f64::NAN, last_finite });
        }
    }
    Ok(TrainOutcome { state, loss_curve: curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame_id: String,
    pub image_loss: f64,
    pub point_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_frame: Vec<FrameEval>,
    pub mean_image_loss: f64,
    pub mean_point_rmse: f64,
}

/// Root mean squared distance between corresponding points.
pub fn point_rmse(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

/// Conditions on each frame's true codes and compares with its targets.
pub fn evaluate_heldout(
    state: &ToyState,
    params: &ToyParams,
    frames: &[ToyFrame],
    weights: &LossWeights,
) -> Result<EvalResult, ToyError> {
    if frames.is_empty() {
        return Err(ToyError::ConfigInvalid("no frames to evaluate".into()));
    }
    let codes: Vec<&[f64]> = frames.iter().map(|f| f.expression_code.as_slice()).collect();
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose_code).collect();
    let pass = state.forward(&codes, &poses)?;
    let per_frame = frames
        .iter()
        .zip(&pass.positions)
        .map(|(f, pos)| {
            let img = RenderCache::new(pos, params.grid, params.kernel_sigma_px).image;
            Ok(FrameEval {
                frame_id: f.frame_id.clone(),
                image_loss: recon_loss(&img, &f.target_image, weights)?,
                point_rmse: point_rmse(pos, &f.target_points),
            })
        })
        .collect::<Result<Vec<_>, ToyError>>()?;
    let k = per_frame.len() as f64;
    Ok(EvalResult {
        mean_image_loss: per_frame.iter().map(|e| e.image_loss).sum::<f64>() / k,
        mean_point_rmse: per_frame.iter().map(|e| e.point_rmse).sum::<f64>() / k,
        per_frame,
    })
}

/// Central-difference step for [`grad_check`].
pub const DEFAULT_GRAD_EPS: f64 = 1e-5;

/// Step for the linearized model with [`GradObjective::Points`]: the objective
/// is quadratic in each parameter, so central differences are exact for any
/// step and a unit step keeps roundoff smallest.
pub const LINEAR_GRAD_EPS: f64 = 1.0;

/// Scalar checked by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradObjective {
    /// The training reconstruction loss of the frame.
    Image,
    /// `½·Σ‖x_i − target_i‖²` over deformed points.
    Points,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    /// Analytic and finite-difference values at `worst_param`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub params_checked: usize,
}

/// Per-term contributions to the checked objective. Differencing term by term
/// avoids cancelling two nearly equal totals.
fn objective_terms(
    state: &ToyState,
    frame: &ToyFrame,
    params: &ToyParams,
    weights: &LossWeights,
    obj: GradObjective,
) -> Result<Vec<f64>, ToyError> {
    let pass = state.forward(&[&frame.expression_code], &[frame.pose_code])?;
    let pos = &pass.positions[0];
    match obj {
        GradObjective::Image => {
            let img = RenderCache::new(pos, params.grid, params.kernel_sigma_px).image;
            recon_loss_terms(&img, &frame.target_image, weights)
        }
        GradObjective::Points => {
            Ok(pos.iter().zip(&frame.target_points).flat_map(|(p, q)| [p[0] - q[0], p[1] - q[1]]).collect())
        }
    }
}

fn objective_grad(
    state: &ToyState,
    frame: &ToyFrame,
    params: &ToyParams,
    weights: &LossWeights,
    obj: GradObjective,
) -> Result<Vec<f64>, ToyError> {
    match obj {
        GradObjective::Image => {
            let (_, g) = loss_and_grad(
                state,
                &[&frame.expression_code],
                &[frame.pose_code],
                &[&frame.target_image],
                params,
                weights,
            )?;
            Ok(g.flatten())
        }
        GradObjective::Points => {
            let pass = state.forward(&[&frame.expression_code], &[frame.pose_code])?;
            let d: Vec<[f64; 2]> =
                pass.positions[0].iter().zip(&frame.target_points).map(|(p, q)| [p[0] - q[0], p[1] - q[1]]).collect();
            Ok(state.backward(&pass, &[d]).flatten())
        }
    }
}

/// Largest `|g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)` over every trainable
/// parameter, with central differences of step `eps`.
pub fn grad_check(
    state: &ToyState,
    params: &ToyParams,
    frame: &ToyFrame,
    weights: &LossWeights,
    objective: GradObjective,
    eps: f64,
) -> Result<GradCheckReport, ToyError> {
    let analytic = objective_grad(state, frame, params, weights, objective)?;
    let base = state.flatten();
    let mut probe = state.clone();
    let mut worst = (0.0, 0, 0.0, 0.0);
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        probe.unflatten(&flat);
        let up = objective_terms(&probe, frame, params, weights, objective)?;
        flat[i] = base[i] - eps;
        probe.unflatten(&flat);
        let down = objective_terms(&probe, frame, params, weights, objective)?;
        flat[i] = base[i];
        let diff: f64 = match objective {
            GradObjective::Image => up.iter().zip(&down).map(|(u, d)| u - d).sum(),
            // ½(u² − d²) = ½(u − d)(u + d) for each residual coordinate
            GradObjective::Points => up.iter().zip(&down).map(|(u, d)| 0.5 * (u - d) * (u + d)).sum(),
        };
        let fd = diff / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, i, analytic[i], fd);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
        params_checked: base.len(),
    })
}
