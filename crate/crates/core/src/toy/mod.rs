//! Desk-scale deformable point avatar used to measure RAF end to end.

pub mod io;
pub mod model;
pub mod render;
pub mod train;
pub mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::AugmentError;
use crate::bank::BankError;
use crate::retrieval::RetrievalError;

pub use io::{read_model, write_model, ModelHeader};
pub use model::{blend_weights, deform, Activation, CanonicalPointSet, DeformationModel, Mlp, Pose, ToyState};
pub use render::{downsample2, recon_loss, recon_loss_terms, render_points, Image};
pub use train::{
    evaluate_heldout, grad_check, init_state, train_toy, train_toy_observed, EvalResult, GradCheckReport,
    GradObjective, Optimizer, PlanSource, Schedule, TrainConfig, TrainOutcome, DEFAULT_GRAD_EPS, LINEAR_GRAD_EPS,
};
pub use world::{make_experiment_split, synth_generate, ExperimentConfig, ExperimentSplit, SyntheticWorld, ToyFrame};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("image size {got} does not match {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown identity {0:?}")]
    UnknownIdentity(String),
    #[error("model contains non-finite weights")]
    NonFiniteWeights,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("loss became non-finite at epoch {epoch} (value {loss}, last finite {last_finite})")]
    DivergedLoss { epoch: usize, loss: f64, last_finite: f64 },
    #[error("frame {0:?} is not a training frame")]
    NotTrainingFrame(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed architecture and rendering settings of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub grid: usize,
    pub kernel_sigma_px: f64,
    pub tau: f64,
    pub hidden: usize,
    pub d_g: usize,
    pub landmarks: Vec<[f64; 2]>,
    pub activation: Activation,
    /// Extra factor on the output layer's initial weights.
    pub output_init_scale: f64,
}

impl ToyParams {
    /// Identity activations and a blend radius so large that every weight is
    /// 1. Deformed positions are then linear in each single parameter.
    pub fn linearized(&self) -> Self {
        Self { activation: Activation::Identity, tau: 1e30, ..self.clone() }
    }
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            grid: 32,
            kernel_sigma_px: 1.2,
            tau: 0.3,
            hidden: 64,
            d_g: 8,
            landmarks: vec![[-0.35, 0.3], [0.35, 0.3], [-0.3, -0.35], [0.3, -0.35]],
            activation: Activation::Tanh,
            output_init_scale: 0.1,
        }
    }
}
