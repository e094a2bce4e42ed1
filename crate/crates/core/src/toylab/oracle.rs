//! Stochastic oracle detectors with a controllable error model.
//!
//! An oracle reads the ground truth of a scene and corrupts it: classes
//! flow through a confusion matrix, confidences are drawn from separate
//! laws for correct and incorrect emissions, coordinates jitter, objects
//! go missing, and background cells spawn spurious detections. This gives
//! controlled pseudo-label error statistics without training anything.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::types::{
    AnchorRef, Box2D, ClassDistribution, Detection, DetectionSet, Geometry,
};

use super::scene::ToyScene;

/// Confidence ranges conditioned on whether the emitted class is correct.
/// Values are drawn uniformly from the range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceLaw {
    pub correct: (f64, f64),
    pub incorrect: (f64, f64),
}

impl ConfidenceLaw {
    pub fn validate(&self) -> Result<(), String> {
        for (lo, hi) in [self.correct, self.incorrect] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(format!("confidence range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, correct: bool, rng: &mut R) -> f64 {
        let (lo, hi) = if correct { self.correct } else { self.incorrect };
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

/// Error model of one oracle detector.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Row-stochastic C x C matrix: probability of emitting class j for a
    /// true class i.
    pub confusion: Vec<Vec<f64>>,
    pub confidence_law: ConfidenceLaw,
    /// Standard deviation of the coordinate noise, in grid units.
    pub localization_jitter: f64,
    pub miss_rate: f64,
    /// Probability per grid cell of a spurious background detection.
    pub spurious_rate: f64,
}

impl NoiseModel {
    /// Identity confusion, no jitter, no misses, no spurious boxes.
    pub fn clean(classes: usize) -> Self {
        Self {
            confusion: identity_confusion(classes),
            confidence_law: ConfidenceLaw { correct: (0.8, 0.99), incorrect: (0.5, 0.9) },
            localization_jitter: 0.0,
            miss_rate: 0.0,
            spurious_rate: 0.0,
        }
    }

    /// Symmetric confusion: stay with probability 1 - error, otherwise
    /// uniform over the remaining classes.
    pub fn symmetric(classes: usize, error: f64) -> Self {
        let off = error / (classes as f64 - 1.0);
        let confusion = (0..classes)
            .map(|i| {
                (0..classes)
                    .map(|j| if i == j { 1.0 - error } else { off })
                    .collect()
            })
            .collect();
        Self { confusion, ..Self::clean(classes) }
    }

    /// Biased confusion: class i leaks only into class (i + shift) mod C.
    /// Two oracles with different shifts make systematically different
    /// mistakes.
    pub fn shifted(classes: usize, error: f64, shift: usize) -> Self {
        let confusion = (0..classes)
            .map(|i| {
                let mut row = vec![0.0; classes];
                row[i] = 1.0 - error;
                row[(i + shift) % classes] += error;
                row
            })
            .collect();
        Self { confusion, ..Self::clean(classes) }
    }

    /// Confusion biased on one class only: `from` leaks into `to` with the
    /// given probability, all other classes stay clean. Oracles biased on
    /// disjoint classes make disjoint systematic mistakes.
    pub fn single_bias(classes: usize, from: usize, to: usize, error: f64) -> Self {
        assert!(from < classes && to < classes && from != to);
        let mut confusion = identity_confusion(classes);
        confusion[from][from] = 1.0 - error;
        confusion[from][to] = error;
        Self { confusion, ..Self::clean(classes) }
    }

    pub fn validate(&self, classes: usize) -> Result<(), String> {
        if self.confusion.len() != classes {
            return Err(format!("confusion matrix needs {classes} rows"));
        }
        for row in &self.confusion {
            if row.len() != classes {
                return Err(format!("confusion rows need {classes} entries"));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err("confusion entries must lie in [0, 1]".into());
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("confusion row sums to {sum}, expected 1"));
            }
        }
        self.confidence_law.validate()?;
        if self.localization_jitter < 0.0 {
            return Err("localization jitter must be non-negative".into());
        }
        for rate in [self.miss_rate, self.spurious_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return Err("rates must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

fn identity_confusion(classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|i| (0..classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.len() - 1
}

/// Cell index of the point (x, y) on a G x G grid, clamped to the grid.
fn cell_of(grid: usize, x: f64, y: f64) -> usize {
    let col = (x.floor().max(0.0) as usize).min(grid - 1);
    let row = (y.floor().max(0.0) as usize).min(grid - 1);
    row * grid + col
}

/// Simulate one detector pass over a scene.
///
/// Every emitted detection carries a distribution whose argmax is the
/// sampled class and whose max is the drawn confidence (clamped just above
/// the uniform level so it stays the argmax), with the remaining mass
/// spread uniformly. The anchor reference is the cell under the true
/// object center, so two oracles looking at the same object agree on it.
pub fn oracle_predict<R: Rng>(
    scene: &ToyScene,
    noise: &NoiseModel,
    detector_id: u32,
    rng: &mut R,
) -> DetectionSet {
    noise.validate(scene.classes).expect("invalid noise model");
    let classes = scene.classes;
    let floor = (1.0 + 1e-6) / classes as f64;
    let jitter = Normal::new(0.0, noise.localization_jitter.max(1e-300)).unwrap();
    let mut detections = Vec::new();

    for obj in &scene.gt {
        if noise.miss_rate > 0.0 && rng.random::<f64>() < noise.miss_rate {
            continue;
        }
        let emitted = sample_row(&noise.confusion[obj.class_index], rng);
        let correct = emitted == obj.class_index;
        let confidence = noise.confidence_law.sample(correct, rng).clamp(floor, 1.0);
        let b = obj.geometry.as_planar().expect("oracle scenes are planar");
        let (cx, cy) = b.center();
        let geometry = if noise.localization_jitter > 0.0 {
            let ncx = cx + jitter.sample(rng);
            let ncy = cy + jitter.sample(rng);
            let hw = (b.width() / 2.0 + jitter.sample(rng)).max(0.1);
            let hh = (b.height() / 2.0 + jitter.sample(rng)).max(0.1);
            Box2D::new(ncx - hw, ncy - hh, ncx + hw, ncy + hh).expect("positive extent")
        } else {
            *b
        };
        detections.push(Detection {
            image_id: scene.image_id,
            detector_id,
            geometry: Geometry::Planar(geometry),
            dist: ClassDistribution::from_top_score(emitted, confidence, classes)
                .expect("confidence is floored above the uniform level"),
            anchor: Some(AnchorRef { anchor_id: cell_of(scene.grid, cx, cy) }),
        });
    }

    if noise.spurious_rate > 0.0 {
        let g = scene.grid;
        for row in 0..g {
            for col in 0..g {
                if rng.random::<f64>() >= noise.spurious_rate {
                    continue;
                }
                let class = rng.random_range(0..classes);
                let confidence = noise.confidence_law.sample(false, rng).clamp(floor, 1.0);
                let cx = col as f64 + 0.5;
                let cy = row as f64 + 0.5;
                let half = rng.random_range(0.5..1.5);
                detections.push(Detection {
                    image_id: scene.image_id,
                    detector_id,
                    geometry: Geometry::Planar(
                        Box2D::new(cx - half, cy - half, cx + half, cy + half).unwrap(),
                    ),
                    dist: ClassDistribution::from_top_score(class, confidence, classes)
                        .expect("confidence is floored above the uniform level"),
                    anchor: Some(AnchorRef { anchor_id: row * g + col }),
                });
            }
        }
    }

    DetectionSet::new(scene.image_id, detections).expect("oracle output is homogeneous")
}

/// Clone scenes with ground-truth classes resampled through the noise
/// model's confusion matrix. Boxes and features are untouched. Seeding
/// two detectors' labeled splits with differently biased confusions gives
/// them systematically different error patterns.
pub fn corrupt_labels<R: Rng>(
    scenes: &[ToyScene],
    noise: &NoiseModel,
    rng: &mut R,
) -> Vec<ToyScene> {
    scenes
        .iter()
        .map(|scene| {
            noise.validate(scene.classes).expect("invalid noise model");
            let mut out = scene.clone();
            for obj in out.gt.iter_mut() {
                obj.class_index = sample_row(&noise.confusion[obj.class_index], rng);
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rectify::self_label;
    use crate::rng::SeedStream;
    use crate::toylab::scene::{generate_scenes, SceneSpec};

    #[test]
    fn corrupt_labels_touches_only_classes() {
        let spec = SceneSpec::default();
        let scenes = generate_scenes(44, 50, &spec);
        let noise = NoiseModel::shifted(spec.classes, 1.0, 1);
        let mut rng = SeedStream::new(44).child("corrupt").rng();
        let corrupted = corrupt_labels(&scenes, &noise, &mut rng);
        for (a, b) in scenes.iter().zip(&corrupted) {
            assert_eq!(a.features_flat(), b.features_flat());
            for (ga, gb) in a.gt.iter().zip(&b.gt) {
                assert_eq!(ga.geometry, gb.geometry);
                // shift 1 with probability 1 relabels deterministically
                assert_eq!(gb.class_index, (ga.class_index + 1) % spec.classes);
            }
        }
    }

    #[test]
    fn clean_oracle_reproduces_ground_truth() {
        let spec = SceneSpec::default();
        let scenes = generate_scenes(5, 20, &spec);
        let noise = NoiseModel::clean(spec.classes);
        let mut rng = SeedStream::new(5).child("oracle").rng();
        for scene in &scenes {
            let set = oracle_predict(scene, &noise, 0, &mut rng);
            assert_eq!(set.len(), scene.gt.len());
            for (d, g) in set.iter().zip(&scene.gt) {
                assert_eq!(d.argmax_class(), g.class_index);
                assert_eq!(d.geometry, g.geometry);
                assert!(d.confidence() >= 0.8);
            }
        }
    }

    #[test]
    fn clean_oracle_gives_perfect_pseudo_precision() {
        let spec = SceneSpec::default();
        let scenes = generate_scenes(6, 30, &spec);
        let noise = NoiseModel::clean(spec.classes);
        let mut rng = SeedStream::new(6).child("oracle").rng();
        for scene in &scenes {
            let set = oracle_predict(scene, &noise, 0, &mut rng);
            // tau below the law's minimum keeps everything
            let pseudo = self_label(&set, 0.7);
            assert_eq!(pseudo.len(), scene.gt.len());
            assert_eq!(
                crate::metrics::pseudo_precision(&pseudo, &scene.gt, 0.5),
                Some(1.0)
            );
        }
    }

    #[test]
    fn forced_confusion_relabels_everything() {
        let spec = SceneSpec { classes: 2, ..SceneSpec::default() };
        let scenes = generate_scenes(7, 10, &spec);
        // class 0 -> class 1 with probability 1
        let mut noise = NoiseModel::clean(2);
        noise.confusion = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let mut rng = SeedStream::new(7).child("oracle").rng();
        for scene in &scenes {
            for d in oracle_predict(scene, &noise, 0, &mut rng).iter() {
                assert_eq!(d.argmax_class(), 1);
            }
        }
    }

    #[test]
    fn miss_rate_thins_emissions_within_3_sigma() {
        let spec = SceneSpec { max_objects: 4, ..SceneSpec::default() };
        let scenes = generate_scenes(8, 4000, &spec);
        let noise = NoiseModel { miss_rate: 0.3, ..NoiseModel::clean(spec.classes) };
        let mut rng = SeedStream::new(8).child("oracle").rng();
        let mut total = 0usize;
        let mut emitted = 0usize;
        for scene in &scenes {
            total += scene.gt.len();
            emitted += oracle_predict(scene, &noise, 0, &mut rng).len();
        }
        assert!(total > 9000);
        let n = total as f64;
        let sigma = (n * 0.3 * 0.7).sqrt();
        assert!(
            (emitted as f64 - 0.7 * n).abs() < 3.0 * sigma,
            "emitted {emitted} of {total}"
        );
    }

    #[test]
    fn noise_model_validation_catches_bad_rows() {
        let mut noise = NoiseModel::clean(3);
        noise.confusion[0][0] = 0.5; // row no longer sums to 1
        assert!(noise.validate(3).is_err());
        assert!(NoiseModel::symmetric(3, 0.2).validate(3).is_ok());
        assert!(NoiseModel::shifted(3, 0.25, 1).validate(3).is_ok());
        let bad_law = NoiseModel {
            confidence_law: ConfidenceLaw { correct: (0.9, 0.5), incorrect: (0.4, 0.8) },
            ..NoiseModel::clean(3)
        };
        assert!(bad_law.validate(3).is_err());
    }
}
