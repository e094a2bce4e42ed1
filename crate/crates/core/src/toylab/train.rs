//! The semi-supervised training loop over toy detectors, in every compared
//! labeling mode.
//!
//! Pseudo-label feed-forward always runs on EMA parameters; gradient steps
//! always apply to the raw parameters. All randomness flows through named
//! streams of the config seed, so a run is a pure function of its inputs.

use thiserror::Error;

use crate::matching::MatchError;
use crate::metrics::{ablate, ap50, AblationKind, ApStyle, ImageGroundTruth, WindowMetrics};
use crate::rectify::{self, StrategyKind};
use crate::rng::SeedStream;
use crate::types::{DetectionSet, MatchConfig, MetricKind, NoMatchPolicy, PseudoBox};

use super::detector::{toy_forward, DetectorShape, EmaState, ShapeMismatch, ToyDetectorParams};
use super::loss::{
    consistency_loss, supervised_loss, unsupervised_loss, AugmentConfig, ParamGrad,
};
use super::scene::ToyScene;

/// How pseudo labels are produced during semi-supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Labeled data only.
    Supervised,
    /// Each detector is supervised by its own thresholded predictions.
    SelfLabel,
    /// Weak-to-strong consistency on labeled and unlabeled batches.
    Consistency,
    /// Two detectors; disagreements resolve toward higher confidence.
    CrossRectify,
    /// Two detectors; matched predictions are averaged.
    CoRectify,
    /// Two detectors; each trains on the other's raw predictions.
    Cps,
    /// Single student; its EMA teacher labels the unlabeled batch.
    OnlineTeacher,
    /// Teacher frozen after warm-up; pseudo labels computed once.
    OfflineTeacher,
    /// N detectors; plurality class, averaged coordinates.
    Majority,
    /// Two detectors; only class-agreeing matches supervise.
    Intersection,
    /// Two detectors; only class-disagreeing matches supervise.
    Difference,
}

impl TrainMode {
    pub const ALL: [TrainMode; 11] = [
        TrainMode::Supervised,
        TrainMode::SelfLabel,
        TrainMode::Consistency,
        TrainMode::CrossRectify,
        TrainMode::CoRectify,
        TrainMode::Cps,
        TrainMode::OnlineTeacher,
        TrainMode::OfflineTeacher,
        TrainMode::Majority,
        TrainMode::Intersection,
        TrainMode::Difference,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::SelfLabel => "self_label",
            TrainMode::Consistency => "consistency",
            TrainMode::CrossRectify => "cross_rectify",
            TrainMode::CoRectify => "co_rectify",
            TrainMode::Cps => "cps",
            TrainMode::OnlineTeacher => "online_teacher",
            TrainMode::OfflineTeacher => "offline_teacher",
            TrainMode::Majority => "majority",
            TrainMode::Intersection => "intersection",
            TrainMode::Difference => "difference",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.name() == name)
    }

    /// Strategy the mode applies per unlabeled scene, if any.
    fn strategy(&self) -> Option<StrategyKind> {
        match self {
            TrainMode::SelfLabel | TrainMode::OnlineTeacher | TrainMode::OfflineTeacher => {
                Some(StrategyKind::SelfLabel)
            }
            TrainMode::CrossRectify => Some(StrategyKind::CrossRectify),
            TrainMode::CoRectify => Some(StrategyKind::CoRectify),
            TrainMode::Cps => Some(StrategyKind::Cps),
            TrainMode::Majority => Some(StrategyKind::Majority),
            TrainMode::Intersection => Some(StrategyKind::Intersection),
            TrainMode::Difference => Some(StrategyKind::Difference),
            TrainMode::Supervised | TrainMode::Consistency => None,
        }
    }

    fn detectors_ok(&self, n: usize) -> bool {
        match self {
            TrainMode::Supervised
            | TrainMode::SelfLabel
            | TrainMode::Consistency
            | TrainMode::OnlineTeacher
            | TrainMode::OfflineTeacher => n == 1,
            TrainMode::CrossRectify
            | TrainMode::CoRectify
            | TrainMode::Cps
            | TrainMode::Intersection
            | TrainMode::Difference => n == 2,
            TrainMode::Majority => n >= 2,
        }
    }
}

/// Confidence threshold schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSchedule {
    Fixed,
    Linear { from: f64, to: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub tau: f64,
    pub delta: f64,
    pub lambda_max: f64,
    /// Fraction of post-warm-up iterations spent ramping lambda up, and
    /// again ramping it down at the end.
    pub ramp_fraction: f64,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub tau_schedule: TauSchedule,
    pub detectors: usize,
    pub ablation: AblationKind,
    /// Metric pairing boxes across detectors (and for KL bookkeeping).
    pub match_metric: MetricKind,
    /// Metric window length in iterations; 0 means a twentieth of the
    /// post-warm-up span.
    pub window_iterations: usize,
    pub consistency_noise: f64,
    pub consistency_flip: bool,
    /// Standard deviation of per-detector feature noise applied during
    /// pseudo-label feed-forward. The draw is a fixed function of the
    /// (detector, scene) pair, so each detector has persistent scene
    /// blind spots that the other detector does not share: the toy analog
    /// of the prediction diversity differently initialized deep detectors
    /// keep through training. Zero disables it.
    pub feedforward_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::SelfLabel,
            tau: 0.5,
            delta: 0.5,
            lambda_max: 2.0,
            ramp_fraction: 0.1,
            iterations: 600,
            warmup_iterations: 60,
            batch_labeled: 2,
            batch_unlabeled: 4,
            learning_rate: 0.05,
            ema_decay: 0.99,
            seed: 0,
            tau_schedule: TauSchedule::Fixed,
            detectors: 1,
            ablation: AblationKind::None,
            match_metric: MetricKind::Iou2d,
            window_iterations: 0,
            consistency_noise: 0.3,
            consistency_flip: true,
            feedforward_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(0.0..1.0).contains(&self.tau) {
            return fail(format!("tau {} must lie in [0, 1)", self.tau));
        }
        if let TauSchedule::Linear { from, to } = self.tau_schedule {
            if !(0.0..1.0).contains(&from) || !(0.0..1.0).contains(&to) {
                return fail("tau schedule endpoints must lie in [0, 1)".into());
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return fail(format!("delta {} must lie in [0, 1]", self.delta));
        }
        if self.warmup_iterations > self.iterations {
            return fail("warmup cannot exceed total iterations".into());
        }
        if self.iterations == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return fail("iterations and batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("ema decay must lie in [0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.ramp_fraction) {
            return fail("ramp fraction must lie in [0, 0.5]".into());
        }
        if self.lambda_max < 0.0 {
            return fail("lambda max cannot be negative".into());
        }
        if self.detectors == 0 || !self.mode.detectors_ok(self.detectors) {
            return fail(format!(
                "mode {} does not run with {} detector(s)",
                self.mode.name(),
                self.detectors
            ));
        }
        Ok(())
    }

    fn match_config(&self) -> MatchConfig {
        MatchConfig {
            metric: self.match_metric,
            delta: self.delta,
            max_center_distance: f64::INFINITY,
            on_no_match: NoMatchPolicy::Virtual,
        }
    }

    fn tau_at(&self, iteration: usize) -> f64 {
        match self.tau_schedule {
            TauSchedule::Fixed => self.tau,
            TauSchedule::Linear { from, to } => {
                if self.iterations <= 1 {
                    from
                } else {
                    from + (to - from) * iteration as f64 / (self.iterations - 1) as f64
                }
            }
        }
    }
}

/// Unsupervised loss weight at an iteration: zero through warm-up, a
/// linear ramp up over `ramp_fraction` of the post-warm-up span, a
/// plateau at `lambda_max`, and a linear ramp back to zero at the end.
pub fn lambda_schedule(cfg: &TrainConfig, iteration: usize) -> f64 {
    assert!(iteration < cfg.iterations, "iteration out of range");
    if iteration < cfg.warmup_iterations {
        return 0.0;
    }
    let span = cfg.iterations - cfg.warmup_iterations;
    let t = (iteration - cfg.warmup_iterations) as f64;
    let ramp = (cfg.ramp_fraction * span as f64).floor();
    if ramp < 1.0 {
        return cfg.lambda_max;
    }
    let up = t / ramp;
    let down = (span as f64 - 1.0 - t) / ramp;
    cfg.lambda_max * up.min(down).min(1.0).max(0.0)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
}

/// Extension points for experiment harnesses.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Per-detector labeled datasets (e.g. labels corrupted by different
    /// oracles). All lists must have the same length.
    pub per_detector_labeled: Option<Vec<Vec<ToyScene>>>,
    /// Detector parameters to start from instead of the seeded init.
    pub initial_params: Option<Vec<ToyDetectorParams>>,
}

#[derive(Debug, Clone)]
pub struct TrainedResult {
    pub params: Vec<ToyDetectorParams>,
    pub ema: Vec<ToyDetectorParams>,
    /// Post-warm-up metric windows, tracked on detector 0's pseudo labels.
    pub windows: Vec<WindowMetrics>,
    /// VOC-style 11-point AP50 of each detector's EMA on the test split.
    pub final_ap50: Vec<f64>,
    /// All-point AP50 of the same predictions; finer-grained, useful for
    /// close comparisons.
    pub final_ap50_all_point: Vec<f64>,
    /// AP50 of the WBF ensemble over all detectors; `None` for a single
    /// detector.
    pub final_ap50_fused: Option<f64>,
    pub final_ap50_fused_all_point: Option<f64>,
}

/// `train_run_with` with default options.
pub fn train_run(
    cfg: &TrainConfig,
    labeled: &[ToyScene],
    unlabeled: &[ToyScene],
    test: &[ToyScene],
) -> Result<TrainedResult, TrainError> {
    train_run_with(cfg, labeled, unlabeled, test, &TrainOptions::default())
}

pub fn train_run_with(
    cfg: &TrainConfig,
    labeled: &[ToyScene],
    unlabeled: &[ToyScene],
    test: &[ToyScene],
    opts: &TrainOptions,
) -> Result<TrainedResult, TrainError> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(TrainError::Config("labeled split is empty".into()));
    }
    if unlabeled.is_empty() && cfg.mode != TrainMode::Supervised {
        return Err(TrainError::Config(format!(
            "mode {} needs unlabeled data",
            cfg.mode.name()
        )));
    }
    if let Some(lists) = &opts.per_detector_labeled {
        if lists.len() != cfg.detectors || lists.iter().any(|l| l.len() != lists[0].len()) {
            return Err(TrainError::Config(
                "per-detector labeled lists must cover every detector with equal lengths".into(),
            ));
        }
        if lists[0].is_empty() {
            return Err(TrainError::Config("labeled split is empty".into()));
        }
    }

    let shape = DetectorShape::for_scene(&labeled[0]);
    let n_det = cfg.detectors;
    let root = SeedStream::new(cfg.seed);
    let mcfg = cfg.match_config();

    let mut params = match &opts.initial_params {
        Some(init) => {
            if init.len() != n_det {
                return Err(TrainError::Config(format!(
                    "expected {n_det} initial parameter sets, got {}",
                    init.len()
                )));
            }
            init.clone()
        }
        None => seeded_init(&root, shape, n_det),
    };
    let mut ema: Vec<EmaState> = params
        .iter()
        .map(|p| EmaState::new(cfg.ema_decay, p.clone()))
        .collect();

    let labeled_len = opts
        .per_detector_labeled
        .as_ref()
        .map(|l| l[0].len())
        .unwrap_or(labeled.len());
    let labeled_for = |k: usize, idx: usize| -> &ToyScene {
        match &opts.per_detector_labeled {
            Some(lists) => &lists[k][idx],
            None => &labeled[idx],
        }
    };

    let mut batch_lab_rng = root.child("batch").child("labeled").rng();
    let mut batch_unl_rng = root.child("batch").child("unlabeled").rng();
    let mut ablate_rng = root.child("ablate").rng();
    let mut aug_rngs: Vec<_> = (0..n_det)
        .map(|k| root.child("aug").child_index(k as u64).rng())
        .collect();
    let ff_streams: Vec<SeedStream> = (0..n_det)
        .map(|k| root.child("ffnoise").child_index(k as u64))
        .collect();
    let aug = AugmentConfig { noise_std: cfg.consistency_noise, hflip: cfg.consistency_flip };

    let span = cfg.iterations - cfg.warmup_iterations;
    let window_len = if cfg.window_iterations > 0 {
        cfg.window_iterations
    } else {
        (span / 20).max(1)
    };

    let mut offline_cache: Option<Vec<Vec<PseudoBox>>> = None;
    let mut windows = Vec::new();
    let mut acc = WindowAcc::default();

    use rand::Rng;
    for iteration in 0..cfg.iterations {
        let tau = cfg.tau_at(iteration);
        let lambda = lambda_schedule(cfg, iteration);
        let post_warmup = iteration >= cfg.warmup_iterations;

        let lab_idx: Vec<usize> = (0..cfg.batch_labeled)
            .map(|_| batch_lab_rng.random_range(0..labeled_len))
            .collect();
        let unl_idx: Vec<usize> = if unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..cfg.batch_unlabeled)
                .map(|_| batch_unl_rng.random_range(0..unlabeled.len()))
                .collect()
        };

        if cfg.mode == TrainMode::OfflineTeacher && post_warmup && offline_cache.is_none() {
            let teacher = &ema[0].params;
            offline_cache = Some(
                unlabeled
                    .iter()
                    .map(|scene| {
                        let set = teacher_forward(teacher, scene, cfg, &ff_streams[0]);
                        rectify::self_label(&set, tau)
                    })
                    .collect(),
            );
        }

        // pseudo labels per detector per unlabeled batch slot, from EMA
        // feed-forward; also the window metric bookkeeping
        let needs_pseudo = post_warmup && cfg.mode.strategy().is_some();
        let mut batch_pseudo: Vec<Vec<Vec<PseudoBox>>> = Vec::new();
        if needs_pseudo {
            let strategy = cfg.mode.strategy().expect("checked above");
            for &idx in &unl_idx {
                let scene = &unlabeled[idx];
                let sets: Vec<DetectionSet> = ema
                    .iter()
                    .zip(&ff_streams)
                    .map(|(state, stream)| teacher_forward(&state.params, scene, cfg, stream))
                    .collect();
                let per_detector: Vec<Vec<PseudoBox>> = if cfg.mode == TrainMode::OfflineTeacher {
                    vec![offline_cache.as_ref().expect("cache filled post warm-up")[idx].clone()]
                } else {
                    (0..n_det)
                        .map(|k| rectify::apply_strategy(strategy, &sets, k, tau, &mcfg))
                        .collect::<Result<_, _>>()?
                };

                acc.record_pseudo(&per_detector[0], scene);
                acc.record_kl(cfg, &params, &ema, &sets, scene, &mcfg)?;
                batch_pseudo.push(per_detector);
            }
        } else if post_warmup && cfg.mode == TrainMode::Consistency {
            // consistency has no pseudo boxes; KL is still meaningful
            for &idx in &unl_idx {
                let scene = &unlabeled[idx];
                let sets = vec![teacher_forward(&ema[0].params, scene, cfg, &ff_streams[0])];
                acc.record_kl(cfg, &params, &ema, &sets, scene, &mcfg)?;
            }
        }

        // gradient step per detector on raw parameters
        for k in 0..n_det {
            let mut grad = ParamGrad::zeros_like(&params[k]);
            let mut denom = 0.0;
            for &idx in &lab_idx {
                let lg = supervised_loss(&params[k], labeled_for(k, idx));
                grad.add_scaled(&lg.grad, 1.0)?;
                denom += 1.0;
            }
            grad.scale(1.0 / denom);

            if post_warmup && lambda > 0.0 {
                match cfg.mode {
                    TrainMode::Supervised => {}
                    TrainMode::Consistency => {
                        let mut cons = ParamGrad::zeros_like(&params[k]);
                        for &idx in &lab_idx {
                            let lg = consistency_loss(
                                &params[k],
                                labeled_for(k, idx),
                                &aug,
                                &mut aug_rngs[k],
                            );
                            cons.add_scaled(&lg.grad, 1.0 / lab_idx.len() as f64)?;
                        }
                        for &idx in &unl_idx {
                            let lg = consistency_loss(
                                &params[k],
                                &unlabeled[idx],
                                &aug,
                                &mut aug_rngs[k],
                            );
                            cons.add_scaled(&lg.grad, 1.0 / unl_idx.len() as f64)?;
                        }
                        grad.add_scaled(&cons, lambda)?;
                    }
                    _ => {
                        let mut unsup = ParamGrad::zeros_like(&params[k]);
                        for (slot, &idx) in unl_idx.iter().enumerate() {
                            let scene = &unlabeled[idx];
                            let raw = &batch_pseudo[slot][if cfg.mode == TrainMode::OfflineTeacher
                            {
                                0
                            } else {
                                k
                            }];
                            let supervising = ablate(
                                raw,
                                &scene.gt,
                                cfg.ablation,
                                scene.classes,
                                &mut ablate_rng,
                            );
                            let lg = unsupervised_loss(&params[k], scene, &supervising);
                            unsup.add_scaled(&lg.grad, 1.0 / unl_idx.len() as f64)?;
                        }
                        grad.add_scaled(&unsup, lambda)?;
                    }
                }
            }

            let update = ToyDetectorParams { shape, cls_w: grad.cls_w, loc_w: grad.loc_w };
            params[k].add_scaled(&update, -cfg.learning_rate)?;
            ema[k] = ema[k].update(&params[k])?;
        }

        if post_warmup {
            acc.iters += 1;
            let t = iteration - cfg.warmup_iterations;
            if (t + 1) % window_len == 0 || iteration + 1 == cfg.iterations {
                windows.push(acc.close(windows.len()));
            }
        }
    }

    // final evaluation on the test split, EMA parameters
    let gts: Vec<ImageGroundTruth> = test
        .iter()
        .map(|s| ImageGroundTruth { image_id: s.image_id, boxes: s.gt.clone() })
        .collect();
    let mut final_ap50 = Vec::with_capacity(n_det);
    let mut final_ap50_all_point = Vec::with_capacity(n_det);
    let mut per_detector_sets: Vec<Vec<DetectionSet>> = Vec::with_capacity(n_det);
    for state in &ema {
        let sets: Vec<DetectionSet> = test.iter().map(|s| toy_forward(&state.params, s)).collect();
        final_ap50.push(ap50(&sets, &gts, ApStyle::Voc07Eleven));
        final_ap50_all_point.push(ap50(&sets, &gts, ApStyle::AllPoint));
        per_detector_sets.push(sets);
    }
    let (final_ap50_fused, final_ap50_fused_all_point) = if n_det >= 2 {
        let fcfg = crate::fusion::FusionConfig::default();
        let fused: Vec<DetectionSet> = (0..test.len())
            .map(|i| {
                let per_image: Vec<DetectionSet> =
                    per_detector_sets.iter().map(|sets| sets[i].clone()).collect();
                crate::fusion::wbf_fuse(&per_image, &fcfg)
                    .expect("toy detections are planar and weights default")
            })
            .collect();
        (
            Some(ap50(&fused, &gts, ApStyle::Voc07Eleven)),
            Some(ap50(&fused, &gts, ApStyle::AllPoint)),
        )
    } else {
        (None, None)
    };

    Ok(TrainedResult {
        params,
        ema: ema.into_iter().map(|s| s.params).collect(),
        windows,
        final_ap50,
        final_ap50_all_point,
        final_ap50_fused,
        final_ap50_fused_all_point,
    })
}

/// Pseudo-label feed-forward: EMA parameters over the scene's features,
/// with the configured per-detector perception noise. The noise of a
/// (detector, scene) pair is identical on every visit.
fn teacher_forward(
    params: &ToyDetectorParams,
    scene: &ToyScene,
    cfg: &TrainConfig,
    stream: &SeedStream,
) -> DetectionSet {
    if cfg.feedforward_noise > 0.0 {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, cfg.feedforward_noise).unwrap();
        let mut rng = stream.child_index(scene.image_id as u64).rng();
        let mut features = scene.features_flat().to_vec();
        for v in features.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        super::detector::toy_forward_features(params, &features, scene.image_id)
    } else {
        toy_forward(params, scene)
    }
}

fn seeded_init(root: &SeedStream, shape: DetectorShape, n_det: usize) -> Vec<ToyDetectorParams> {
    use rand_distr::{Distribution, Normal};
    // one shared random base plus an independently seeded perturbation per
    // detector: same structure, different initialization
    let base_normal = Normal::new(0.0, 0.02).unwrap();
    let head_normal = Normal::new(0.0, 0.15).unwrap();
    let mut base_rng = root.child("init").child("backbone").rng();
    let mut base = ToyDetectorParams::zeros(shape);
    base.cls_w.iter_mut().for_each(|v| *v = base_normal.sample(&mut base_rng));
    base.loc_w.iter_mut().for_each(|v| *v = base_normal.sample(&mut base_rng));

    (0..n_det)
        .map(|k| {
            let mut rng = root.child("init").child("head").child_index(k as u64).rng();
            let mut p = base.clone();
            p.cls_w.iter_mut().for_each(|v| *v += head_normal.sample(&mut rng));
            p.loc_w.iter_mut().for_each(|v| *v += head_normal.sample(&mut rng));
            p
        })
        .collect()
}

#[derive(Default)]
struct WindowAcc {
    tp: usize,
    total: usize,
    kl_sum: f64,
    kl_scenes: usize,
    iters: usize,
}

impl WindowAcc {
    fn record_pseudo(&mut self, pseudo: &[PseudoBox], scene: &ToyScene) {
        self.total += pseudo.len();
        self.tp += crate::metrics::correct_count(pseudo, &scene.gt, 0.5);
    }

    /// KL between the two detectors' EMA predictions, or between the raw
    /// student and its EMA teacher when there is only one detector.
    fn record_kl(
        &mut self,
        cfg: &TrainConfig,
        params: &[ToyDetectorParams],
        ema: &[EmaState],
        sets: &[DetectionSet],
        scene: &ToyScene,
        mcfg: &MatchConfig,
    ) -> Result<(), MatchError> {
        let kl = if sets.len() >= 2 {
            crate::metrics::mean_kl(&sets[0], &sets[1], mcfg)?
        } else {
            let student = toy_forward(&params[0], scene);
            crate::metrics::mean_kl(&student, &sets[0], mcfg)?
        };
        let _ = (cfg, ema);
        self.kl_sum += kl;
        self.kl_scenes += 1;
        Ok(())
    }

    fn close(&mut self, window_index: usize) -> WindowMetrics {
        let metrics = WindowMetrics {
            window_index,
            pseudo_precision: if self.total > 0 {
                Some(self.tp as f64 / self.total as f64)
            } else {
                None
            },
            correct_count: if self.iters > 0 { self.tp as f64 / self.iters as f64 } else { 0.0 },
            mean_kl: if self.kl_scenes > 0 { self.kl_sum / self.kl_scenes as f64 } else { 0.0 },
            pseudo_total: self.total,
        };
        *self = WindowAcc::default();
        metrics
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::scene::{generate_scenes, SceneSpec};

    fn splits(seed: u64, spec: &SceneSpec) -> (Vec<ToyScene>, Vec<ToyScene>, Vec<ToyScene>) {
        let all = generate_scenes(seed, 40, spec);
        let labeled = all[..6].to_vec();
        let unlabeled = all[6..28].to_vec();
        let test = all[28..].to_vec();
        (labeled, unlabeled, test)
    }

    fn quick_cfg(mode: TrainMode, detectors: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            detectors,
            seed,
            iterations: 60,
            warmup_iterations: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_schedule_shape() {
        let cfg = TrainConfig {
            iterations: 120,
            warmup_iterations: 20,
            ramp_fraction: 0.1,
            lambda_max: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(lambda_schedule(&cfg, 0), 0.0);
        assert_eq!(lambda_schedule(&cfg, 19), 0.0);
        assert_eq!(lambda_schedule(&cfg, 20), 0.0); // ramp starts at zero
        // plateau midpoint
        assert_eq!(lambda_schedule(&cfg, 70), 2.0);
        // final iteration back to zero
        assert_eq!(lambda_schedule(&cfg, 119), 0.0);
        // continuity: adjacent values differ by at most lambda_max / ramp
        let ramp = (0.1f64 * 100.0).floor();
        for i in 20..119 {
            let d = (lambda_schedule(&cfg, i + 1) - lambda_schedule(&cfg, i)).abs();
            assert!(d <= 2.0 / ramp + 1e-12);
        }
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let bad = TrainConfig { mode: TrainMode::CrossRectify, detectors: 1, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig { tau: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { warmup_iterations: 700, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let ok = TrainConfig { mode: TrainMode::Majority, detectors: 3, ..TrainConfig::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let spec = SceneSpec::default();
        let (labeled, unlabeled, test) = splits(91, &spec);
        let cfg = quick_cfg(TrainMode::CrossRectify, 2, 5);
        let a = train_run(&cfg, &labeled, &unlabeled, &test).unwrap();
        let b = train_run(&cfg, &labeled, &unlabeled, &test).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
        assert_eq!(a.windows, b.windows);
        assert_eq!(a.final_ap50, b.final_ap50);
        assert_eq!(a.final_ap50_fused, b.final_ap50_fused);
    }

    #[test]
    fn supervised_ignores_unlabeled_and_matches_zero_lambda() {
        let spec = SceneSpec::default();
        let (labeled, unlabeled, test) = splits(92, &spec);
        let sup_empty = train_run(
            &quick_cfg(TrainMode::Supervised, 1, 7),
            &labeled,
            &[],
            &test,
        )
        .unwrap();
        let sup_full = train_run(
            &quick_cfg(TrainMode::Supervised, 1, 7),
            &labeled,
            &unlabeled,
            &test,
        )
        .unwrap();
        assert_eq!(sup_empty.params, sup_full.params);
        // self-labeling with lambda pinned to zero takes the same
        // parameter trajectory
        let zeroed = TrainConfig {
            lambda_max: 0.0,
            ..quick_cfg(TrainMode::SelfLabel, 1, 7)
        };
        let sela = train_run(&zeroed, &labeled, &unlabeled, &test).unwrap();
        assert_eq!(sup_full.params, sela.params);
    }

    #[test]
    fn all_modes_run_and_produce_windows() {
        let spec = SceneSpec::default();
        let (labeled, unlabeled, test) = splits(93, &spec);
        for mode in TrainMode::ALL {
            let detectors = match mode {
                TrainMode::Majority => 3,
                m if m.detectors_ok(2) => 2,
                _ => 1,
            };
            let cfg = quick_cfg(mode, detectors, 11);
            let result = train_run(&cfg, &labeled, &unlabeled, &test).unwrap();
            assert_eq!(result.params.len(), detectors);
            assert_eq!(result.final_ap50.len(), detectors);
            assert!(!result.windows.is_empty());
            assert_eq!(result.final_ap50_fused.is_some(), detectors >= 2);
            for ap in &result.final_ap50 {
                assert!((0.0..=1.0).contains(ap));
            }
        }
    }
}
