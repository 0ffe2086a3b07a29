//! Retrieval-based augmentation for expression-driven avatars.
//!
//! The crate holds a bank of expression features from many identities, an
//! exact k-NN index over it, distribution-coverage metrics, a training-plan
//! builder that swaps a subject's expressions for retrieved cross-identity
//! ones, and a small differentiable point-splat avatar used to measure the
//! effect end to end.

pub mod augmentation;
pub mod bank;
pub mod coverage;
pub mod linalg;
pub mod retrieval;
pub mod rng;
pub mod toy;
