//! Weighted boxes fusion of detection sets from multiple detectors.
//!
//! Boxes are clustered greedily per class in descending score order and
//! each cluster collapses to a score-weighted average box. Scores of
//! clusters supported by few detectors are scaled down by the member-to-
//! model ratio.

use thiserror::Error;

use crate::matching::iou_2d;
use crate::types::{Box2D, ClassDistribution, Detection, DetectionSet, Geometry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("weighted boxes fusion does not support 3d geometry")]
    Unsupported3d,
    #[error("fusion needs at least one input set")]
    NoInputSets,
    #[error("expected {expected} model weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("model weights must be positive and finite")]
    BadWeight,
    #[error("cluster iou {0} must lie strictly inside (0, 1)")]
    ClusterIouOutOfRange(f64),
    #[error("input sets must refer to one image")]
    MixedImages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Fused score is the plain mean of member scores.
    #[default]
    Mean,
    /// Fused score is the model-weight-adjusted mean of member scores.
    WeightedMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub cluster_iou: f64,
    /// One positive weight per input set; empty means equal weights.
    pub model_weights: Vec<f64>,
    pub score_mode: ScoreMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { cluster_iou: 0.55, model_weights: Vec::new(), score_mode: ScoreMode::Mean }
    }
}

impl FusionConfig {
    fn validate(&self, num_sets: usize) -> Result<Vec<f64>, FusionError> {
        if !(self.cluster_iou > 0.0 && self.cluster_iou < 1.0) {
            return Err(FusionError::ClusterIouOutOfRange(self.cluster_iou));
        }
        let weights = if self.model_weights.is_empty() {
            vec![1.0; num_sets]
        } else {
            self.model_weights.clone()
        };
        if weights.len() != num_sets {
            return Err(FusionError::WeightCount { expected: num_sets, got: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(FusionError::BadWeight);
        }
        Ok(weights)
    }
}

struct Member {
    boxed: Box2D,
    score: f64,
    model_weight: f64,
    anchor: Option<crate::types::AnchorRef>,
    order: usize,
}

struct Cluster {
    members: Vec<Member>,
    fused: Box2D,
}

impl Cluster {
    fn new(member: Member) -> Self {
        let fused = member.boxed;
        Self { members: vec![member], fused }
    }

    fn push(&mut self, member: Member) {
        self.members.push(member);
        self.fused = self.weighted_box();
    }

    /// Score-weighted coordinatewise mean, clamped into the members'
    /// min/max envelope. Singleton clusters keep the member box untouched.
    fn weighted_box(&self) -> Box2D {
        if self.members.len() == 1 {
            return self.members[0].boxed;
        }
        let mut acc = [0.0f64; 4];
        let mut total = 0.0f64;
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for m in &self.members {
            let w = m.score * m.model_weight;
            let c = [m.boxed.x_min, m.boxed.y_min, m.boxed.x_max, m.boxed.y_max];
            for k in 0..4 {
                acc[k] += w * c[k];
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
            total += w;
        }
        let coord = |k: usize| (acc[k] / total).clamp(lo[k], hi[k]);
        Box2D {
            x_min: coord(0),
            y_min: coord(1),
            x_max: coord(2),
            y_max: coord(3),
        }
    }

    fn fused_score(&self, mode: ScoreMode, num_models: usize) -> f64 {
        let n = self.members.len() as f64;
        let base = match mode {
            ScoreMode::Mean => self.members.iter().map(|m| m.score).sum::<f64>() / n,
            ScoreMode::WeightedMean => {
                let num: f64 = self.members.iter().map(|m| m.score * m.model_weight).sum();
                let den: f64 = self.members.iter().map(|m| m.model_weight).sum();
                num / den
            }
        };
        base * (n / num_models as f64).min(1.0)
    }
}

/// Fuse 2d detection sets from `sets.len()` detectors into one set.
///
/// Output detections carry the fused score as their max probability with
/// the remaining mass spread uniformly; scores are floored just above the
/// uniform level 1/C so the fused class stays the argmax. The output is
/// sorted by fused score descending (ties by class, then insertion order).
pub fn wbf_fuse(sets: &[DetectionSet], cfg: &FusionConfig) -> Result<DetectionSet, FusionError> {
    if sets.is_empty() {
        return Err(FusionError::NoInputSets);
    }
    let weights = cfg.validate(sets.len())?;
    let image_id = sets[0].image_id();
    if sets.iter().any(|s| s.image_id() != image_id) {
        return Err(FusionError::MixedImages);
    }

    let mut classes = 0usize;
    let mut pool: Vec<(usize, Member)> = Vec::new();
    let mut order = 0usize;
    for (model, set) in sets.iter().enumerate() {
        for d in set.iter() {
            let boxed = match d.geometry {
                Geometry::Planar(b) => b,
                Geometry::Spatial(_) => return Err(FusionError::Unsupported3d),
            };
            classes = classes.max(d.dist.num_classes());
            pool.push((
                d.argmax_class(),
                Member {
                    boxed,
                    score: d.confidence(),
                    model_weight: weights[model],
                    anchor: d.anchor,
                    order,
                },
            ));
            order += 1;
        }
    }
    if pool.is_empty() {
        return Ok(DetectionSet::empty(image_id));
    }

    // descending score, stable on input order
    pool.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .expect("scores are finite")
            .then(a.1.order.cmp(&b.1.order))
    });

    let mut clusters: Vec<(usize, Cluster)> = Vec::new();
    for (class, member) in pool {
        let slot = clusters.iter_mut().find(|(c, cluster)| {
            *c == class && iou_2d(&cluster.fused, &member.boxed) >= cfg.cluster_iou
        });
        match slot {
            Some((_, cluster)) => cluster.push(member),
            None => clusters.push((class, Cluster::new(member))),
        }
    }

    let mut fused: Vec<(f64, usize, Detection)> = Vec::with_capacity(clusters.len());
    let floor = (1.0 + 1e-9) / classes as f64;
    for (class, cluster) in &clusters {
        let score = cluster.fused_score(cfg.score_mode, sets.len());
        // a score at or below 1/C cannot be the max of a C-way
        // distribution; floor it and let ties fall back to input order
        let emitted = score.max(floor).min(1.0);
        let dist = ClassDistribution::from_top_score(*class, emitted, classes)
            .expect("floored score is representable");
        let anchor = if cluster.members.len() == 1 { cluster.members[0].anchor } else { None };
        fused.push((
            score,
            cluster.members[0].order,
            Detection {
                image_id,
                detector_id: 0,
                geometry: Geometry::Planar(cluster.fused),
                dist,
                anchor,
            },
        ));
    }
    fused.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("scores are finite").then(a.1.cmp(&b.1))
    });
    let detections = fused.into_iter().map(|(_, _, d)| d).collect();
    Ok(DetectionSet::new(image_id, detections).expect("fusion output is homogeneous"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ClassDistribution;
    use proptest::prelude::*;

    fn b2(x0: f64, y0: f64, x1: f64, y1: f64) -> Box2D {
        Box2D::new(x0, y0, x1, y1).unwrap()
    }

    fn det(class: usize, score: f64, b: Box2D) -> Detection {
        Detection {
            image_id: 0,
            detector_id: 0,
            geometry: Geometry::Planar(b),
            dist: ClassDistribution::from_top_score(class, score, 3).unwrap(),
            anchor: None,
        }
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        DetectionSet::new(0, dets).unwrap()
    }

    #[test]
    fn single_box_passes_through() {
        let b = b2(1.0, 2.0, 4.0, 5.0);
        let out = wbf_fuse(&[set(vec![det(1, 0.8, b)])], &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(*out.detections()[0].geometry.as_planar().unwrap(), b);
        assert!((out.detections()[0].confidence() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_average_scores() {
        let b = b2(0.0, 0.0, 3.0, 3.0);
        let out = wbf_fuse(
            &[set(vec![det(2, 0.6, b)]), set(vec![det(2, 0.8, b)])],
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        let d = &out.detections()[0];
        assert_eq!(*d.geometry.as_planar().unwrap(), b);
        // mean of scores, member/model ratio 1
        assert_eq!(d.confidence(), (0.6 + 0.8) / 2.0);
        assert_eq!(d.argmax_class(), 2);
    }

    #[test]
    fn disjoint_boxes_stay_separate() {
        let out = wbf_fuse(
            &[set(vec![
                det(0, 0.9, b2(0.0, 0.0, 1.0, 1.0)),
                det(0, 0.7, b2(5.0, 5.0, 6.0, 6.0)),
            ])],
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        // sorted by fused score descending
        assert!(out.detections()[0].confidence() >= out.detections()[1].confidence());
    }

    #[test]
    fn different_classes_never_merge() {
        let b = b2(0.0, 0.0, 3.0, 3.0);
        let out = wbf_fuse(
            &[set(vec![det(0, 0.9, b)]), set(vec![det(1, 0.8, b)])],
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn unmatched_boxes_are_downweighted() {
        // a box seen by one of two models halves its score
        let out = wbf_fuse(
            &[set(vec![det(1, 0.9, b2(0.0, 0.0, 3.0, 3.0))]), set(vec![])],
            &FusionConfig::default(),
        )
        .unwrap();
        assert!((out.detections()[0].confidence() - 0.45).abs() < 1e-12);
    }

    #[test]
    fn rejects_3d_and_bad_config() {
        let d3 = Detection {
            image_id: 0,
            detector_id: 0,
            geometry: Geometry::Spatial(
                crate::types::Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap(),
            ),
            dist: ClassDistribution::new(vec![0.2, 0.8]).unwrap(),
            anchor: None,
        };
        let s = DetectionSet::new(0, vec![d3]).unwrap();
        assert_eq!(wbf_fuse(&[s], &FusionConfig::default()), Err(FusionError::Unsupported3d));
        assert_eq!(wbf_fuse(&[], &FusionConfig::default()), Err(FusionError::NoInputSets));

        let cfg = FusionConfig { model_weights: vec![1.0, 2.0], ..FusionConfig::default() };
        let one = set(vec![det(0, 0.9, b2(0.0, 0.0, 1.0, 1.0))]);
        assert!(matches!(wbf_fuse(&[one], &cfg), Err(FusionError::WeightCount { .. })));
    }

    fn arb_cluster_boxes() -> impl Strategy<Value = Vec<(f64, Box2D)>> {
        // overlapping boxes around a common rectangle, plus scores
        (1.0f64..8.0, 1.0f64..8.0, 2.0f64..5.0, 2.0f64..5.0).prop_flat_map(|(x, y, w, h)| {
            prop::collection::vec(
                (0.35f64..1.0, -0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3).prop_map(
                    move |(s, dx0, dy0, dx1, dy1)| {
                        (s, b2(x + dx0, y + dy0, x + w + dx1, y + h + dy1))
                    },
                ),
                1..6,
            )
        })
    }

    proptest! {
        #[test]
        fn fused_box_stays_in_member_envelope(members in arb_cluster_boxes()) {
            let dets: Vec<Detection> = members.iter().map(|(s, b)| det(0, *s, *b)).collect();
            let n = dets.len();
            let out = wbf_fuse(&[set(dets)], &FusionConfig::default()).unwrap();
            prop_assert!(out.len() <= n);
            let lo_x = members.iter().map(|(_, b)| b.x_min).fold(f64::INFINITY, f64::min);
            let hi_x = members.iter().map(|(_, b)| b.x_max).fold(f64::NEG_INFINITY, f64::max);
            for d in out.iter() {
                let b = d.geometry.as_planar().unwrap();
                prop_assert!(b.x_min >= lo_x - 1e-12 && b.x_max <= hi_x + 1e-12);
            }
        }

        #[test]
        fn fusion_is_idempotent_on_separated_sets(
            scores in prop::collection::vec(0.4f64..1.0, 1..5),
        ) {
            // disjoint boxes, one per score, sorted descending up front
            let mut scored = scores.clone();
            scored.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let dets: Vec<Detection> = scored
                .iter()
                .enumerate()
                .map(|(i, s)| det(0, *s, b2(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 3.0, 3.0)))
                .collect();
            let once = wbf_fuse(&[set(dets)], &FusionConfig::default()).unwrap();
            let twice = wbf_fuse(&[once.clone()], &FusionConfig::default()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
