//! Pseudo-label generation and rectification for semi-supervised object
//! detection.
//!
//! Two detectors trained from different initializations disagree on some
//! of their high-confidence predictions; those disagreements expose the
//! misclassifications neither detector can notice in its own output. This
//! crate implements the cross-rectification rule that resolves each
//! matched disagreement toward the higher-confidence prediction, the
//! baseline strategies it is compared against (plain self-labeling, cross
//! pseudo supervision, prediction averaging, intersection / difference
//! sets, N-detector majority voting), weighted boxes fusion for detector
//! ensembling, pseudo-label quality metrics, and a small self-contained
//! training lab: a synthetic scene generator, stochastic oracle detectors
//! with controllable error models, and a trainable linear anchor-grid
//! detector with the full semi-supervised loss structure.
//!
//! Everything is deterministic given a seed: data generation, detector
//! initialization, noise, and training draw from independent named
//! streams, so experiments reproduce bit for bit.

pub mod fusion;
pub mod matching;
pub mod metrics;
pub mod rectify;
pub mod rng;
pub mod toylab;
pub mod types;

pub use matching::{best_match, match_sets, MatchResult};
pub use rectify::StrategyKind;
pub use types::{
    Box2D, Box3D, ClassDistribution, Detection, DetectionSet, Geometry, GroundTruthBox,
    MatchConfig, MetricKind, PseudoBox,
};
