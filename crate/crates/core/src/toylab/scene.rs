//! Synthetic scene generation.
//!
//! A scene is a G x G grid of feature vectors plus ground-truth boxes in
//! grid coordinates. Per cell the feature vector is laid out as:
//!
//! - one constant channel fixed at 1 (lets a linear head act affinely);
//! - `features` signature channels: cells covered by an object emit that
//!   class's fixed Gaussian signature scaled by the overlap fraction, on
//!   top of background noise;
//! - five geometry channels describing the dominant overlapping object
//!   relative to the cell: center offset, log sizes, and the squared
//!   center distance, all with small noise. Offsets make boxes linearly
//!   recoverable; the squared distance makes "this cell is the one under
//!   the object center" linearly separable for the classifier head.
//!
//! Signatures are derived from the seed alone, so scenes generated from
//! one seed share them regardless of count.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::SeedStream;
use crate::types::{Box2D, Geometry, GroundTruthBox};

/// Shape and difficulty of generated scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Number of foreground classes, C >= 2.
    pub classes: usize,
    /// Grid side length G; cell (row, col) covers [col, col+1] x [row, row+1].
    pub grid: usize,
    /// Signature channels per cell; the full per-cell feature vector has
    /// `features + 6` entries (constant + signatures + geometry).
    pub features: usize,
    /// Objects per scene are drawn uniformly from 1..=max_objects.
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Scale of the per-class feature signatures.
    pub signature_strength: f64,
    /// Fraction of signature energy shared between classes, in [0, 1).
    /// Higher values make classes confusable while keeping objects easy
    /// to tell from background.
    pub signature_correlation: f64,
    /// Standard deviation of noise on the signature channels.
    pub feature_noise: f64,
    /// Per-scene spread of the signature noise scale: each scene draws a
    /// multiplier uniformly from [1 - spread, 1 + spread]. Harder scenes
    /// produce genuinely ambiguous features, giving confidence scores a
    /// real correlation with correctness.
    pub difficulty_spread: f64,
    /// Standard deviation of noise on the geometry channels.
    pub geometry_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            grid: 6,
            features: 6,
            max_objects: 1,
            min_object_size: 2.8,
            max_object_size: 4.2,
            signature_strength: 2.0,
            signature_correlation: 0.68,
            feature_noise: 0.8,
            difficulty_spread: 0.6,
            geometry_noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.classes < 2 {
            return Err("scene spec needs at least 2 classes".into());
        }
        if self.features < self.classes + 1 {
            return Err("signature channels must number at least classes + 1".into());
        }
        if self.grid < 2 || self.features == 0 || self.max_objects == 0 {
            return Err("scene spec needs grid >= 2, features >= 1, max_objects >= 1".into());
        }
        if !(self.min_object_size > 0.0 && self.min_object_size <= self.max_object_size) {
            return Err("object size range is empty or non-positive".into());
        }
        if self.max_object_size > self.grid as f64 {
            return Err("objects cannot exceed the grid".into());
        }
        if self.signature_strength <= 0.0 || self.feature_noise < 0.0 || self.geometry_noise < 0.0
        {
            return Err("signature strength must be positive, noise non-negative".into());
        }
        if !(0.0..1.0).contains(&self.signature_correlation) {
            return Err("signature correlation must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.difficulty_spread) {
            return Err("difficulty spread must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Full per-cell feature dimension: constant + signatures + geometry.
    pub fn feature_dim(&self) -> usize {
        self.features + 6
    }
}

/// One synthetic image: feature grid plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub image_id: i64,
    pub classes: usize,
    pub grid: usize,
    pub feature_dim: usize,
    features: Vec<f64>,
    pub gt: Vec<GroundTruthBox>,
}

impl ToyScene {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn features_at(&self, cell: usize) -> &[f64] {
        let f = self.feature_dim;
        &self.features[cell * f..(cell + 1) * f]
    }

    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    /// Clone of the scene with replaced per-cell features (same layout).
    pub fn with_features(&self, features: Vec<f64>) -> ToyScene {
        assert_eq!(features.len(), self.features.len());
        ToyScene { features, ..self.clone() }
    }
}

/// The canonical per-class feature signatures: a shared component along
/// the first signature axis plus a per-class component along the class's
/// own axis, mixed by `signature_correlation`. The construction is
/// deterministic, so every seed faces the same class geometry and Bayes
/// difficulty; seeds vary scenes and noise only.
pub(crate) fn class_signatures(spec: &SceneSpec) -> Vec<Vec<f64>> {
    let rho = spec.signature_correlation;
    let shared = rho.sqrt() * spec.signature_strength;
    let own = (1.0 - rho).sqrt() * spec.signature_strength;
    (0..spec.classes)
        .map(|c| {
            let mut sig = vec![0.0; spec.features];
            sig[0] = shared;
            sig[1 + c] = own;
            sig
        })
        .collect()
}

/// Overlap area between a box and the unit cell at (row, col).
fn cell_overlap(b: &Box2D, row: usize, col: usize) -> f64 {
    let cx0 = col as f64;
    let cy0 = row as f64;
    let ix = (b.x_max.min(cx0 + 1.0) - b.x_min.max(cx0)).max(0.0);
    let iy = (b.y_max.min(cy0 + 1.0) - b.y_min.max(cy0)).max(0.0);
    ix * iy
}

/// Generate `count` scenes deterministically from `seed`.
///
/// Scenes produced from the same seed share class signatures, so splits
/// carved out of one call transfer to each other. Panics when `count` is 0
/// or the spec is invalid.
pub fn generate_scenes(seed: u64, count: usize, spec: &SceneSpec) -> Vec<ToyScene> {
    assert!(count >= 1, "scene generation needs count >= 1");
    spec.validate().expect("invalid scene spec");

    let signatures = class_signatures(spec);
    let scenes_stream = SeedStream::new(seed).child("scenes");
    let noise = Normal::new(0.0, spec.feature_noise).unwrap();
    let geo_noise = Normal::new(0.0, spec.geometry_noise.max(1e-300)).unwrap();
    let g = spec.grid;
    let n_sig = spec.features;
    let f = spec.feature_dim();

    (0..count)
        .map(|i| {
            let mut rng = scenes_stream.child_index(i as u64).rng();
            let noise_scale = if spec.difficulty_spread > 0.0 {
                rng.random_range(1.0 - spec.difficulty_spread..=1.0 + spec.difficulty_spread)
            } else {
                1.0
            };
            let n_objects = rng.random_range(1..=spec.max_objects);
            let mut gt = Vec::with_capacity(n_objects);
            for _ in 0..n_objects {
                let class_index = rng.random_range(0..spec.classes);
                let w = rng.random_range(spec.min_object_size..=spec.max_object_size);
                let h = rng.random_range(spec.min_object_size..=spec.max_object_size);
                let x_min = rng.random_range(0.0..=(g as f64 - w));
                let y_min = rng.random_range(0.0..=(g as f64 - h));
                let boxed = Box2D::new(x_min, y_min, x_min + w, y_min + h)
                    .expect("generated boxes are non-degenerate");
                gt.push(GroundTruthBox { class_index, geometry: Geometry::Planar(boxed) });
            }

            let mut features = vec![0.0f64; g * g * f];
            for row in 0..g {
                for col in 0..g {
                    let cell = row * g + col;
                    let slot = &mut features[cell * f..(cell + 1) * f];
                    slot[0] = 1.0;
                    let sig_slot = &mut slot[1..=n_sig];
                    for v in sig_slot.iter_mut() {
                        *v = noise.sample(&mut rng) * noise_scale;
                    }
                    let mut dominant: Option<(f64, &GroundTruthBox)> = None;
                    for obj in &gt {
                        let b = obj.geometry.as_planar().expect("toy scenes are planar");
                        let frac = cell_overlap(b, row, col);
                        if frac > 0.0 {
                            for (v, s) in sig_slot.iter_mut().zip(&signatures[obj.class_index]) {
                                *v += frac * s;
                            }
                        }
                        if dominant.map_or(frac > 0.0, |(best, _)| frac > best) {
                            dominant = Some((frac, obj));
                        }
                    }
                    // geometry channels: dominant object's center offset
                    // from the cell center plus log sizes, noise elsewhere
                    let geo_slot = &mut slot[n_sig + 1..];
                    for v in geo_slot.iter_mut() {
                        *v = geo_noise.sample(&mut rng);
                    }
                    if let Some((frac, obj)) = dominant {
                        if frac > 0.0 {
                            let b = obj.geometry.as_planar().unwrap();
                            let (cx, cy) = b.center();
                            let dx = cx - (col as f64 + 0.5);
                            let dy = cy - (row as f64 + 0.5);
                            geo_slot[0] += dx;
                            geo_slot[1] += dy;
                            geo_slot[2] += b.width().ln();
                            geo_slot[3] += b.height().ln();
                            geo_slot[4] += dx * dx + dy * dy;
                        }
                    }
                }
            }

            ToyScene {
                image_id: i as i64,
                classes: spec.classes,
                grid: g,
                feature_dim: f,
                features,
                gt,
            }
        })
        .collect()
}
