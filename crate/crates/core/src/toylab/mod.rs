//! Desk-scale experiment substrate: synthetic scenes, stochastic oracle
//! detectors, and a trainable linear anchor-grid detector with the full
//! semi-supervised training loop.

mod detector;
mod loss;
mod oracle;
mod scene;
mod train;

pub use detector::{
    toy_forward, DetectorShape, EmaState, HeadKind, ShapeMismatch, ToyDetectorParams, ASSIGN_IOU,
    NMS_IOU, SMOOTH_L1_BETA,
};
pub use loss::{
    consistency_loss, consistency_loss_from_targets, consistency_targets, strong_view,
    supervised_loss, unsupervised_loss, AugmentConfig, ConsistencyTargets, LossGrad, ParamGrad,
};
pub use oracle::{corrupt_labels, oracle_predict, ConfidenceLaw, NoiseModel};
pub use scene::{generate_scenes, SceneSpec, ToyScene};
pub use train::{
    lambda_schedule, train_run, train_run_with, TauSchedule, TrainConfig, TrainError, TrainMode,
    TrainOptions, TrainedResult,
};
