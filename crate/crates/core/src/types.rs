//! Domain types shared by every module: boxes, class distributions,
//! detections, ground truth, pseudo labels, and matching configuration.

use thiserror::Error;

/// Sum tolerance for class distributions.
pub const DIST_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("class distribution needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("probability {value} at index {index} is outside [0, 1]")]
    ProbOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1 within 1e-9")]
    NotNormalized(f64),
    #[error("top score {score} cannot be the maximum of a {classes}-class distribution")]
    TopScoreTooLow { score: f64, classes: usize },
    #[error("box has a non-finite coordinate")]
    NonFiniteBox,
    #[error("box is degenerate: min corner must be strictly below max corner")]
    DegenerateBox,
    #[error("3d box size must be strictly positive")]
    NonPositiveSize,
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange { index: usize, classes: usize },
    #[error("detections in a set must share one image id")]
    MixedImageIds,
    #[error("detections in a set must share one geometry variant")]
    MixedGeometry,
    #[error("matching delta {0} must lie in [0, 1]")]
    DeltaOutOfRange(f64),
    #[error("max center distance must be positive")]
    NonPositiveCenterDistance,
}

/// A normalized probability vector over the C foreground classes.
///
/// Background never appears here: the toy detector strips its background
/// logit and renormalizes before constructing one of these, so every
/// rectification strategy sees a plain C-class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ValidationError> {
        if probs.len() < 2 {
            return Err(ValidationError::TooFewClasses(probs.len()));
        }
        let mut sum = 0.0;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(ValidationError::ProbOutOfRange { index, value });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(ValidationError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Build a distribution whose maximum is `score` at `class`, with the
    /// remaining mass spread uniformly over the other classes. Used when a
    /// source only reports a (class, score) pair.
    ///
    /// Fails when `score` is too small to be the maximum of a `classes`-way
    /// distribution (score must strictly exceed the uniform remainder).
    pub fn from_top_score(
        class: usize,
        score: f64,
        classes: usize,
    ) -> Result<Self, ValidationError> {
        if classes < 2 {
            return Err(ValidationError::TooFewClasses(classes));
        }
        if class >= classes {
            return Err(ValidationError::ClassIndexOutOfRange { index: class, classes });
        }
        let remainder = (1.0 - score) / (classes as f64 - 1.0);
        if !score.is_finite() || score > 1.0 || score <= remainder {
            return Err(ValidationError::TopScoreTooLow { score, classes });
        }
        let mut probs = vec![remainder; classes];
        probs[class] = score;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Maximum probability.
    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Index of the maximum probability; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Elementwise mean of two distributions of equal arity.
    pub fn mean(&self, other: &Self) -> Result<Self, ValidationError> {
        if self.probs.len() != other.probs.len() {
            return Err(ValidationError::TooFewClasses(other.probs.len()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        Self::new(probs)
    }
}

/// Axis-aligned 2d box in corner encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ValidationError> {
        let b = Self { x_min, y_min, x_max, y_max };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(ValidationError::NonFiniteBox);
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(ValidationError::DegenerateBox);
        }
        Ok(b)
    }

    /// From (x, y, w, h); used at ingestion only, corners are canonical.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ValidationError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Oriented 3d box: center, size, yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, ValidationError> {
        if !center.iter().chain(size.iter()).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(ValidationError::NonFiniteBox);
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(ValidationError::NonPositiveSize);
        }
        Ok(Self { center, size, yaw })
    }
}

/// 2d or 3d box geometry. Detection sets are homogeneous in this variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Planar(Box2D),
    Spatial(Box3D),
}

impl Geometry {
    pub fn is_planar(&self) -> bool {
        matches!(self, Geometry::Planar(_))
    }

    pub fn same_variant(&self, other: &Geometry) -> bool {
        self.is_planar() == other.is_planar()
    }

    pub fn as_planar(&self) -> Option<&Box2D> {
        match self {
            Geometry::Planar(b) => Some(b),
            Geometry::Spatial(_) => None,
        }
    }

    pub fn as_spatial(&self) -> Option<&Box3D> {
        match self {
            Geometry::Spatial(b) => Some(b),
            Geometry::Planar(_) => None,
        }
    }

    /// Coordinatewise mean of two same-variant geometries.
    pub fn mean(&self, other: &Geometry) -> Option<Geometry> {
        match (self, other) {
            (Geometry::Planar(a), Geometry::Planar(b)) => Some(Geometry::Planar(Box2D {
                x_min: (a.x_min + b.x_min) / 2.0,
                y_min: (a.y_min + b.y_min) / 2.0,
                x_max: (a.x_max + b.x_max) / 2.0,
                y_max: (a.y_max + b.y_max) / 2.0,
            })),
            (Geometry::Spatial(a), Geometry::Spatial(b)) => Some(Geometry::Spatial(Box3D {
                center: [
                    (a.center[0] + b.center[0]) / 2.0,
                    (a.center[1] + b.center[1]) / 2.0,
                    (a.center[2] + b.center[2]) / 2.0,
                ],
                size: [
                    (a.size[0] + b.size[0]) / 2.0,
                    (a.size[1] + b.size[1]) / 2.0,
                    (a.size[2] + b.size[2]) / 2.0,
                ],
                yaw: (a.yaw + b.yaw) / 2.0,
            })),
            _ => None,
        }
    }

    /// Coordinatewise mean of a non-empty same-variant slice.
    pub fn mean_of(geoms: &[Geometry]) -> Option<Geometry> {
        let first = geoms.first()?;
        let n = geoms.len() as f64;
        match first {
            Geometry::Planar(_) => {
                let mut acc = [0.0f64; 4];
                for g in geoms {
                    let b = g.as_planar()?;
                    acc[0] += b.x_min;
                    acc[1] += b.y_min;
                    acc[2] += b.x_max;
                    acc[3] += b.y_max;
                }
                Some(Geometry::Planar(Box2D {
                    x_min: acc[0] / n,
                    y_min: acc[1] / n,
                    x_max: acc[2] / n,
                    y_max: acc[3] / n,
                }))
            }
            Geometry::Spatial(_) => {
                let mut c = [0.0f64; 3];
                let mut s = [0.0f64; 3];
                let mut yaw = 0.0f64;
                for g in geoms {
                    let b = g.as_spatial()?;
                    for k in 0..3 {
                        c[k] += b.center[k];
                        s[k] += b.size[k];
                    }
                    yaw += b.yaw;
                }
                Some(Geometry::Spatial(Box3D {
                    center: [c[0] / n, c[1] / n, c[2] / n],
                    size: [s[0] / n, s[1] / n, s[2] / n],
                    yaw: yaw / n,
                }))
            }
        }
    }
}

/// Identifies the anchor cell of the grid detector that produced a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorRef {
    pub anchor_id: usize,
}

/// One predicted box with its full foreground class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: i64,
    pub detector_id: u32,
    pub geometry: Geometry,
    pub dist: ClassDistribution,
    pub anchor: Option<AnchorRef>,
}

impl Detection {
    /// Max probability score of the detection.
    pub fn confidence(&self) -> f64 {
        self.dist.max_prob()
    }

    /// Predicted hard class; ties break toward the lowest index.
    pub fn argmax_class(&self) -> usize {
        self.dist.argmax()
    }
}

/// All detections one detector produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    image_id: i64,
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_id: i64, detections: Vec<Detection>) -> Result<Self, ValidationError> {
        if detections.iter().any(|d| d.image_id != image_id) {
            return Err(ValidationError::MixedImageIds);
        }
        if let Some(first) = detections.first() {
            if !detections
                .iter()
                .all(|d| d.geometry.same_variant(&first.geometry))
            {
                return Err(ValidationError::MixedGeometry);
            }
        }
        Ok(Self { image_id, detections })
    }

    pub fn empty(image_id: i64) -> Self {
        Self { image_id, detections: Vec::new() }
    }

    pub fn image_id(&self) -> i64 {
        self.image_id
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.detections.iter()
    }

    pub fn into_detections(self) -> Vec<Detection> {
        self.detections
    }
}

/// A hard pseudo label: the training target distilled from detections.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBox {
    pub class_index: usize,
    pub geometry: Geometry,
    pub source_confidence: f64,
}

/// An annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub class_index: usize,
    pub geometry: Geometry,
}

/// Which matching metric pairs boxes across two detection sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Intersection over union of 2d boxes.
    Iou2d,
    /// 1 when both boxes come from the same anchor cell, else 0.
    Anchor,
    /// Negative euclidean distance between 3d box centers.
    Center3d,
}

/// What to do with a query that has no acceptable counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoMatchPolicy {
    /// Pair the query with a virtual copy of itself (metric value 1).
    #[default]
    Virtual,
    /// Drop the query from strategy outputs.
    Drop,
}

/// Configuration of the cross-detector box matching step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub metric: MetricKind,
    /// Acceptance threshold on IoU; matches below it become virtual.
    pub delta: f64,
    /// Acceptance radius for the center-distance metric; may be infinite.
    pub max_center_distance: f64,
    pub on_no_match: NoMatchPolicy,
}

impl MatchConfig {
    pub fn iou2d(delta: f64) -> Self {
        Self {
            metric: MetricKind::Iou2d,
            delta,
            max_center_distance: f64::INFINITY,
            on_no_match: NoMatchPolicy::Virtual,
        }
    }

    pub fn anchor() -> Self {
        Self {
            metric: MetricKind::Anchor,
            delta: 0.5,
            max_center_distance: f64::INFINITY,
            on_no_match: NoMatchPolicy::Virtual,
        }
    }

    pub fn center3d(max_center_distance: f64) -> Self {
        Self {
            metric: MetricKind::Center3d,
            delta: 0.5,
            max_center_distance,
            on_no_match: NoMatchPolicy::Virtual,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(0.0..=1.0).contains(&self.delta) || !self.delta.is_finite() {
            return Err(ValidationError::DeltaOutOfRange(self.delta));
        }
        if !(self.max_center_distance > 0.0) {
            return Err(ValidationError::NonPositiveCenterDistance);
        }
        Ok(())
    }
}

impl Default for MatchConfig {
    /// IoU matching at delta 0.5 with the virtual-box fallback.
    fn default() -> Self {
        Self::iou2d(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(probs: &[f64]) -> ClassDistribution {
        ClassDistribution::new(probs.to_vec()).unwrap()
    }

    fn det(probs: &[f64]) -> Detection {
        Detection {
            image_id: 0,
            detector_id: 0,
            geometry: Geometry::Planar(Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap()),
            dist: dist(probs),
            anchor: None,
        }
    }

    #[test]
    fn confidence_is_max_prob() {
        assert_eq!(det(&[0.1, 0.9]).confidence(), 0.9);
        assert_eq!(det(&[0.5, 0.5]).confidence(), 0.5);
        assert_eq!(det(&[0.2, 0.3, 0.5]).confidence(), 0.5);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(det(&[0.1, 0.9]).argmax_class(), 1);
        assert_eq!(det(&[0.5, 0.5]).argmax_class(), 0);
        assert_eq!(det(&[0.2, 0.3, 0.5]).argmax_class(), 2);
    }

    #[test]
    fn confidence_matches_argmax_entry() {
        for probs in [&[0.3, 0.3, 0.4][..], &[0.5, 0.5], &[1.0, 0.0]] {
            let d = det(probs);
            assert_eq!(d.confidence(), d.dist.probs()[d.argmax_class()]);
        }
    }

    #[test]
    fn distribution_rejects_bad_input() {
        assert!(ClassDistribution::new(vec![1.0]).is_err());
        assert!(ClassDistribution::new(vec![0.6, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::new(vec![0.49, 0.51]).is_ok());
    }

    #[test]
    fn from_top_score_spreads_remainder() {
        let d = ClassDistribution::from_top_score(2, 0.9, 4).unwrap();
        let third = (1.0 - 0.9) / 3.0;
        assert_eq!(d.probs()[2], 0.9);
        for i in [0, 1, 3] {
            assert!((d.probs()[i] - third).abs() < 1e-15);
        }
        assert_eq!(d.argmax(), 2);
        // 0.2 cannot be the max of a 4-class distribution (uniform is 0.25)
        assert!(ClassDistribution::from_top_score(0, 0.2, 4).is_err());
    }

    #[test]
    fn boxes_validate() {
        assert!(Box2D::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(Box2D::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, 1.0, 0.0], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], 0.3).is_ok());
    }

    #[test]
    fn detection_set_enforces_homogeneity() {
        let d2 = det(&[0.5, 0.5]);
        let mut d3 = det(&[0.5, 0.5]);
        d3.geometry = Geometry::Spatial(Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap());
        assert!(DetectionSet::new(0, vec![d2.clone(), d3]).is_err());
        let mut other_image = d2.clone();
        other_image.image_id = 5;
        assert!(DetectionSet::new(0, vec![d2.clone(), other_image]).is_err());
        assert!(DetectionSet::new(0, vec![d2.clone(), d2]).is_ok());
    }

    #[test]
    fn match_config_validates() {
        assert!(MatchConfig::iou2d(0.5).validate().is_ok());
        assert!(MatchConfig::iou2d(1.5).validate().is_err());
        assert!(MatchConfig::center3d(0.0).validate().is_err());
        assert!(MatchConfig::center3d(f64::INFINITY).validate().is_ok());
    }

    #[test]
    fn geometry_mean_is_coordinatewise() {
        let a = Geometry::Planar(Box2D::new(0.0, 0.0, 2.0, 2.0).unwrap());
        let b = Geometry::Planar(Box2D::new(0.0, 0.0, 4.0, 2.0).unwrap());
        let m = a.mean(&b).unwrap();
        assert_eq!(*m.as_planar().unwrap(), Box2D::new(0.0, 0.0, 3.0, 2.0).unwrap());
    }
}
