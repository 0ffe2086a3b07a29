//! Per-epoch conditioning plans: native, retrieval-substituted, or noised.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::FeatureVector;
use crate::retrieval::{Index, NeighborResult, QueryConstraint, RetrievalError, SubstituteMode};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("noise sigma must be finite and nonnegative, got {0}")]
    BadSigma(f64),
    #[error("loss weights must be nonnegative with at least one positive")]
    BadWeights,
    #[error("frame {position} has dimension {got}, index has {expected}")]
    DimensionMismatch { position: usize, expected: usize, got: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub identity_id: String,
    pub frame_id: String,
}

impl FrameRef {
    pub fn new(identity_id: impl Into<String>, frame_id: impl Into<String>) -> Self {
        Self { identity_id: identity_id.into(), frame_id: frame_id.into() }
    }
}

/// A training frame as seen by the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFrame {
    pub frame_ref: FrameRef,
    pub feature: FeatureVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Native,
    Retrieved(usize),
    Noised,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanItem {
    pub frame_ref: FrameRef,
    pub conditioning: FeatureVector,
    pub source: Source,
    /// Set for retrieved items.
    pub neighbor: Option<NeighborResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub epoch: u64,
    pub p: f64,
    pub seed: u64,
    pub items: Vec<PlanItem>,
}

impl AugmentationPlan {
    pub fn conditioning(&self) -> impl Iterator<Item = &FeatureVector> {
        self.items.iter().map(|i| &i.conditioning)
    }

    pub fn retrieved_count(&self) -> usize {
        self.items.iter().filter(|i| matches!(i.source, Source::Retrieved(_))).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_perceptual: f64,
}

impl LossWeights {
    pub fn new(lambda_l1: f64, lambda_perceptual: f64) -> Result<Self, AugmentError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(lambda_l1) || !ok(lambda_perceptual) || lambda_l1 + lambda_perceptual <= 0.0 {
            return Err(AugmentError::BadWeights);
        }
        Ok(Self { lambda_l1, lambda_perceptual })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l1: 1.0, lambda_perceptual: 0.1 }
    }
}

fn check_p(p: f64) -> Result<(), AugmentError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AugmentError::BadProbability(p));
    }
    Ok(())
}

/// `(1 − p)·l_self + p·l_raf`.
pub fn combine_losses(l_self: f64, l_raf: f64, p: f64) -> Result<f64, AugmentError> {
    check_p(p)?;
    Ok((1.0 - p) * l_self + p * l_raf)
}

/// RNG address for the neighbor pick of one frame in one epoch.
pub fn draw_index(epoch: u64, position: usize) -> u64 {
    (epoch << 32) | position as u64
}

/// Whether frame `position` is substituted in `epoch`.
pub fn substitution_flag(seed: u64, epoch: u64, position: usize, p: f64) -> bool {
    rng::uniform_at(seed, &[rng::tag::SUBSTITUTE_FLAG, epoch, position as u64]) < p
}

pub fn make_plan_vanilla(frames: &[PlanFrame], epoch: u64, seed: u64) -> AugmentationPlan {
    AugmentationPlan {
        epoch,
        p: 0.0,
        seed,
        items: frames
            .iter()
            .map(|f| PlanItem {
                frame_ref: f.frame_ref.clone(),
                conditioning: f.feature.clone(),
                source: Source::Native,
                neighbor: None,
            })
            .collect(),
    }
}

pub fn make_plan_noise(
    frames: &[PlanFrame],
    sigma: f64,
    epoch: u64,
    seed: u64,
) -> Result<AugmentationPlan, AugmentError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(AugmentError::BadSigma(sigma));
    }
    let items = frames
        .par_iter()
        .enumerate()
        .map(|(pos, f)| {
            let mut eps = vec![0.0; f.feature.dim()];
            rng::normals_at(seed, &[rng::tag::NOISE, epoch, pos as u64], &mut eps);
            let values = f.feature.as_slice().iter().zip(&eps).map(|(x, z)| x + sigma * z).collect();
            PlanItem {
                frame_ref: f.frame_ref.clone(),
                conditioning: FeatureVector::new(values).expect("finite feature plus finite noise"),
                source: Source::Noised,
                neighbor: None,
            }
        })
        .collect();
    Ok(AugmentationPlan { epoch, p: 0.0, seed, items })
}

/// Builds RAF plans for a fixed frame sequence across epochs.
///
/// Neighbor lists are computed the first time a frame is flagged and then
/// reused; only the flags and the top-k pick are re-drawn per epoch.
pub struct RafPlanner<'a> {
    frames: &'a [PlanFrame],
    index: &'a Index,
    subject: String,
    p: f64,
    mode: SubstituteMode,
    seed: u64,
    cache: Vec<Option<Vec<NeighborResult>>>,
}

impl<'a> RafPlanner<'a> {
    pub fn new(
        frames: &'a [PlanFrame],
        subject_identity: &str,
        index: &'a Index,
        p: f64,
        mode: SubstituteMode,
        seed: u64,
    ) -> Result<Self, AugmentError> {
        check_p(p)?;
        for (position, f) in frames.iter().enumerate() {
            if f.feature.dim() != index.dim() {
                return Err(AugmentError::DimensionMismatch { position, expected: index.dim(), got: f.feature.dim() });
            }
        }
        if p > 0.0 && !frames.is_empty() {
            let available = index.candidate_count(&QueryConstraint::excluding(subject_identity));
            if available < mode.k() {
                return Err(RetrievalError::InsufficientCandidates { requested: mode.k(), available }.into());
            }
        }
        Ok(Self { frames, index, subject: subject_identity.to_owned(), p, mode, seed, cache: vec![None; frames.len()] })
    }

    pub fn plan(&mut self, epoch: u64) -> Result<AugmentationPlan, AugmentError> {
        let flags: Vec<bool> =
            (0..self.frames.len()).map(|pos| substitution_flag(self.seed, epoch, pos, self.p)).collect();
        let missing: Vec<usize> =
            (0..self.frames.len()).filter(|&pos| flags[pos] && self.cache[pos].is_none()).collect();
        let constraint = QueryConstraint::excluding(self.subject.clone());
        let found: Vec<Result<Vec<NeighborResult>, RetrievalError>> = missing
            .par_iter()
            .map(|&pos| self.index.knn_search(self.frames[pos].feature.as_slice(), self.mode.k(), &constraint))
            .collect();
        for (pos, res) in missing.into_iter().zip(found) {
            self.cache[pos] = Some(res?);
        }
        let items = self
            .frames
            .iter()
            .enumerate()
            .map(|(pos, f)| match (flags[pos], &self.cache[pos]) {
                (true, Some(neighbors)) => {
                    let nb = self.mode.pick(neighbors, self.seed, draw_index(epoch, pos));
                    PlanItem {
                        frame_ref: f.frame_ref.clone(),
                        conditioning: self.index.feature(nb.entry_index).clone(),
                        source: Source::Retrieved(nb.entry_index),
                        neighbor: Some(nb),
                    }
                }
                _ => PlanItem {
                    frame_ref: f.frame_ref.clone(),
                    conditioning: f.feature.clone(),
                    source: Source::Native,
                    neighbor: None,
                },
            })
            .collect();
        Ok(AugmentationPlan { epoch, p: self.p, seed: self.seed, items })
    }
}

pub fn make_plan_raf(
    frames: &[PlanFrame],
    subject_identity: &str,
    index: &Index,
    p: f64,
    mode: SubstituteMode,
    epoch: u64,
    seed: u64,
) -> Result<AugmentationPlan, AugmentError> {
    RafPlanner::new(frames, subject_identity, index, p, mode, seed)?.plan(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{ExpressionBank, FeatureRecord};

    fn setup() -> (Vec<PlanFrame>, Index) {
        let mut recs = Vec::new();
        for id in ["S", "A", "B", "C"] {
            for f in 0..10 {
                let x = f as f64 * 0.1 + if id == "S" { 0.0 } else { 0.03 * id.as_bytes()[0] as f64 };
                recs.push(FeatureRecord::new(id, format!("{f}"), vec![x, -x]));
            }
        }
        let bank = ExpressionBank::ingest_records(recs, 2).unwrap();
        let frames = (0..10)
            .map(|f| PlanFrame {
                frame_ref: FrameRef::new("S", format!("{f}")),
                feature: FeatureVector::new(vec![f as f64 * 0.1, -(f as f64) * 0.1]).unwrap(),
            })
            .collect();
        (frames, Index::build(&bank).unwrap())
    }

    #[test]
    fn degenerate_probabilities() {
        let (frames, idx) = setup();
        let p0 = make_plan_raf(&frames, "S", &idx, 0.0, SubstituteMode::Top1, 3, 1).unwrap();
        assert!(p0.items.iter().all(|i| i.source == Source::Native));
        assert_eq!(p0.items, make_plan_vanilla(&frames, 3, 1).items);
        let p1 = make_plan_raf(&frames, "S", &idx, 1.0, SubstituteMode::Top1, 3, 1).unwrap();
        for it in &p1.items {
            let Source::Retrieved(e) = it.source else { panic!("not retrieved") };
            assert_ne!(idx.bank().entry(e).identity_id, "S");
        }
        assert_eq!(
            make_plan_raf(&frames, "S", &idx, 1.5, SubstituteMode::Top1, 0, 0).unwrap_err(),
            AugmentError::BadProbability(1.5)
        );
    }

    #[test]
    fn raf_needs_other_identities() {
        let (frames, _) = setup();
        let only_subject =
            ExpressionBank::ingest_records(vec![FeatureRecord::new("S", "x", vec![0.0, 0.0])], 2).unwrap();
        let idx = Index::build(&only_subject).unwrap();
        assert!(matches!(
            make_plan_raf(&frames, "S", &idx, 0.5, SubstituteMode::Top1, 0, 0),
            Err(AugmentError::Retrieval(RetrievalError::InsufficientCandidates { .. }))
        ));
    }

    #[test]
    fn planner_cache_matches_fresh_plans() {
        let (frames, idx) = setup();
        let mode = SubstituteMode::TopKUniform(5);
        let mut planner = RafPlanner::new(&frames, "S", &idx, 0.5, mode, 9).unwrap();
        for epoch in 0..6 {
            let cached = planner.plan(epoch).unwrap();
            let fresh = make_plan_raf(&frames, "S", &idx, 0.5, mode, epoch, 9).unwrap();
            assert_eq!(cached, fresh);
        }
    }

    #[test]
    fn noise_zero_sigma_is_native() {
        let (frames, _) = setup();
        let plan = make_plan_noise(&frames, 0.0, 2, 4).unwrap();
        for (it, f) in plan.items.iter().zip(&frames) {
            assert_eq!(it.conditioning, f.feature);
            assert_eq!(it.source, Source::Noised);
        }
        assert_eq!(make_plan_noise(&frames, -1.0, 0, 0).unwrap_err(), AugmentError::BadSigma(-1.0));
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_losses(1.0, 3.0, 0.5).unwrap(), 2.0);
        assert_eq!(combine_losses(0.7, 9.0, 0.0).unwrap(), 0.7);
        assert_eq!(combine_losses(0.7, 9.0, 1.0).unwrap(), 9.0);
        assert!(combine_losses(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.5).is_ok());
    }
}
