//! Matching metrics between predicted boxes and the best-match search with
//! the virtual-box fallback.
//!
//! Matching is class-agnostic: only geometry (or anchor identity) decides
//! which boxes pair up. Class reconciliation happens in `rectify`.

use thiserror::Error;

use crate::types::{Box2D, Box3D, Detection, DetectionSet, MatchConfig, MetricKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("metric {metric:?} does not apply to the given geometry variant")]
    GeometryMismatch { metric: MetricKind },
    #[error("anchor metric requires an anchor reference on both detections")]
    MissingAnchor,
}

/// Outcome of matching one query against a candidate set.
///
/// `matched` is `None` for the virtual match: the query paired with an
/// exact copy of itself because no candidate was acceptable. Virtual
/// matches carry metric value 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub query_index: usize,
    pub matched: Option<usize>,
    pub metric_value: f64,
}

impl MatchResult {
    pub fn is_virtual(&self) -> bool {
        self.matched.is_none()
    }

    fn virtual_match(query_index: usize) -> Self {
        Self { query_index, matched: None, metric_value: 1.0 }
    }
}

/// Intersection over union of two 2d boxes; 0 when disjoint.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Negative euclidean distance between the centers of two 3d boxes.
/// Always <= 0; equals 0 only for coincident centers.
pub fn center_distance_metric(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let dz = a.center[2] - b.center[2];
    -(dx * dx + dy * dy + dz * dz).sqrt()
}

/// 1 when both detections come from the same anchor, else 0.
pub fn anchor_metric(a: &Detection, b: &Detection) -> Result<f64, MatchError> {
    match (a.anchor, b.anchor) {
        (Some(x), Some(y)) => Ok(if x.anchor_id == y.anchor_id { 1.0 } else { 0.0 }),
        _ => Err(MatchError::MissingAnchor),
    }
}

fn metric_value(
    metric: MetricKind,
    query: &Detection,
    candidate: &Detection,
) -> Result<f64, MatchError> {
    match metric {
        MetricKind::Iou2d => {
            let (a, b) = match (query.geometry.as_planar(), candidate.geometry.as_planar()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(MatchError::GeometryMismatch { metric }),
            };
            Ok(iou_2d(a, b))
        }
        MetricKind::Anchor => anchor_metric(query, candidate),
        MetricKind::Center3d => {
            let (a, b) = match (query.geometry.as_spatial(), candidate.geometry.as_spatial()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(MatchError::GeometryMismatch { metric }),
            };
            Ok(center_distance_metric(a, b))
        }
    }
}

/// Search the best match for `query` among `candidates` under `cfg`.
///
/// Returns the candidate maximizing the metric (ties toward the lowest
/// index), or the virtual match when nothing is acceptable:
/// - iou2d: every candidate below `cfg.delta`, or no candidates;
/// - anchor: no candidate on the query's anchor;
/// - center3d: nearest center farther than `cfg.max_center_distance`, or
///   no candidates.
pub fn best_match(
    query: &Detection,
    candidates: &DetectionSet,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    best_match_indexed(query, 0, candidates, cfg)
}

fn best_match_indexed(
    query: &Detection,
    query_index: usize,
    candidates: &DetectionSet,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let mut best: Option<(usize, f64)> = None;
    for (j, candidate) in candidates.iter().enumerate() {
        let value = metric_value(cfg.metric, query, candidate)?;
        let better = match best {
            None => true,
            Some((_, best_value)) => value > best_value,
        };
        if better {
            best = Some((j, value));
        }
    }
    let accepted = best.filter(|&(_, value)| match cfg.metric {
        MetricKind::Iou2d => value >= cfg.delta,
        MetricKind::Anchor => value == 1.0,
        MetricKind::Center3d => -value <= cfg.max_center_distance,
    });
    Ok(match accepted {
        Some((j, value)) => MatchResult { query_index, matched: Some(j), metric_value: value },
        None => MatchResult::virtual_match(query_index),
    })
}

/// One independent best match per element of `set_a` against `set_b`.
/// Many-to-one matching is allowed.
pub fn match_sets(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    cfg: &MatchConfig,
) -> Result<Vec<MatchResult>, MatchError> {
    set_a
        .iter()
        .enumerate()
        .map(|(i, query)| best_match_indexed(query, i, set_b, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AnchorRef, ClassDistribution, Geometry};
    use proptest::prelude::*;

    fn b2(x0: f64, y0: f64, x1: f64, y1: f64) -> Box2D {
        Box2D::new(x0, y0, x1, y1).unwrap()
    }

    fn det2(b: Box2D, anchor: Option<usize>) -> Detection {
        Detection {
            image_id: 0,
            detector_id: 0,
            geometry: Geometry::Planar(b),
            dist: ClassDistribution::new(vec![0.3, 0.7]).unwrap(),
            anchor: anchor.map(|anchor_id| AnchorRef { anchor_id }),
        }
    }

    fn det3(center: [f64; 3]) -> Detection {
        Detection {
            image_id: 0,
            detector_id: 0,
            geometry: Geometry::Spatial(Box3D::new(center, [1.0; 3], 0.0).unwrap()),
            dist: ClassDistribution::new(vec![0.3, 0.7]).unwrap(),
            anchor: None,
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b2(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &b2(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_hand_computed_overlap() {
        // intersection 2, union 6
        let v = iou_2d(&b2(0.0, 0.0, 2.0, 2.0), &b2(1.0, 0.0, 3.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn center_metric_values() {
        let a = Box3D::new([0.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert_eq!(center_distance_metric(&a, &a), 0.0);
        let b = Box3D::new([3.0, 4.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert_eq!(center_distance_metric(&a, &b), -5.0);
        let c = Box3D::new([1.0, 1.0, 1.0], [1.0; 3], 0.0).unwrap();
        let d = Box3D::new([1.0, 1.0, 2.0], [1.0; 3], 0.0).unwrap();
        assert_eq!(center_distance_metric(&c, &d), -1.0);
    }

    #[test]
    fn anchor_metric_values() {
        let a = det2(b2(0.0, 0.0, 1.0, 1.0), Some(7));
        let b = det2(b2(0.0, 0.0, 1.0, 1.0), Some(7));
        let c = det2(b2(0.0, 0.0, 1.0, 1.0), Some(8));
        let z = det2(b2(0.0, 0.0, 1.0, 1.0), Some(0));
        assert_eq!(anchor_metric(&a, &b).unwrap(), 1.0);
        assert_eq!(anchor_metric(&a, &c).unwrap(), 0.0);
        assert_eq!(anchor_metric(&z, &z.clone()).unwrap(), 1.0);
        let none = det2(b2(0.0, 0.0, 1.0, 1.0), None);
        assert_eq!(anchor_metric(&a, &none), Err(MatchError::MissingAnchor));
    }

    #[test]
    fn best_match_picks_argmax_above_delta() {
        let query = det2(b2(0.0, 0.0, 10.0, 10.0), None);
        // IoU 0.6 and 0.8 against the query
        let c0 = det2(b2(0.0, 0.0, 10.0, 6.0), None);
        let c1 = det2(b2(0.0, 0.0, 10.0, 8.0), None);
        let set = DetectionSet::new(0, vec![c0, c1]).unwrap();
        let r = best_match(&query, &set, &MatchConfig::iou2d(0.5)).unwrap();
        assert_eq!(r.matched, Some(1));
        assert!((r.metric_value - 0.8).abs() < 1e-12);
    }

    #[test]
    fn best_match_virtual_below_delta() {
        let query = det2(b2(0.0, 0.0, 10.0, 10.0), None);
        let c0 = det2(b2(0.0, 0.0, 10.0, 3.0), None); // IoU 0.3
        let c1 = det2(b2(0.0, 0.0, 10.0, 4.0), None); // IoU 0.4
        let set = DetectionSet::new(0, vec![c0, c1]).unwrap();
        let r = best_match(&query, &set, &MatchConfig::iou2d(0.5)).unwrap();
        assert!(r.is_virtual());
        assert_eq!(r.metric_value, 1.0);
    }

    #[test]
    fn best_match_tie_breaks_low() {
        let query = det2(b2(0.0, 0.0, 10.0, 10.0), None);
        let c = det2(b2(0.0, 0.0, 10.0, 5.0), None); // IoU 0.5
        let set = DetectionSet::new(0, vec![c.clone(), c]).unwrap();
        let r = best_match(&query, &set, &MatchConfig::iou2d(0.4)).unwrap();
        assert_eq!(r.matched, Some(0));
    }

    #[test]
    fn best_match_center3d_radius() {
        let query = det3([0.0, 0.0, 0.0]);
        let set = DetectionSet::new(0, vec![det3([3.0, 4.0, 0.0])]).unwrap();
        let near = best_match(&query, &set, &MatchConfig::center3d(6.0)).unwrap();
        assert_eq!(near.matched, Some(0));
        assert_eq!(near.metric_value, -5.0);
        let far = best_match(&query, &set, &MatchConfig::center3d(4.0)).unwrap();
        assert!(far.is_virtual());
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let query = det3([0.0; 3]);
        let set = DetectionSet::new(0, vec![det3([1.0; 3])]).unwrap();
        let err = best_match(&query, &set, &MatchConfig::iou2d(0.5)).unwrap_err();
        assert!(matches!(err, MatchError::GeometryMismatch { .. }));
    }

    #[test]
    fn match_sets_is_total() {
        let empty = DetectionSet::empty(0);
        let candidates =
            DetectionSet::new(0, vec![det2(b2(0.0, 0.0, 1.0, 1.0), None)]).unwrap();
        assert!(match_sets(&empty, &candidates, &MatchConfig::default())
            .unwrap()
            .is_empty());

        let queries = DetectionSet::new(
            0,
            vec![
                det2(b2(0.0, 0.0, 1.0, 1.0), None),
                det2(b2(0.1, 0.0, 1.1, 1.0), None),
                det2(b2(5.0, 5.0, 6.0, 6.0), None),
            ],
        )
        .unwrap();
        let results = match_sets(&queries, &candidates, &MatchConfig::default()).unwrap();
        assert_eq!(results.len(), 3);
        // both overlapping queries land on the same candidate
        assert_eq!(results[0].matched, Some(0));
        assert_eq!(results[1].matched, Some(0));
        assert!(results[2].is_virtual());
    }

    fn arb_box() -> impl Strategy<Value = Box2D> {
        (0.0f64..20.0, 0.0f64..20.0, 0.1f64..10.0, 0.1f64..10.0)
            .prop_map(|(x, y, w, h)| Box2D::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou_2d(&a, &b), iou_2d(&b, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert_eq!(iou_2d(&a, &a), 1.0);
        }

        #[test]
        fn iou_in_unit_interval(a in arb_box(), b in arb_box()) {
            let v = iou_2d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn non_virtual_matches_respect_delta(
            query in arb_box(),
            boxes in prop::collection::vec(arb_box(), 0..8),
            delta in 0.0f64..1.0,
        ) {
            let q = det2(query, None);
            let dets: Vec<_> = boxes.into_iter().map(|b| det2(b, None)).collect();
            let set = DetectionSet::new(0, dets).unwrap();
            let r = best_match(&q, &set, &MatchConfig::iou2d(delta)).unwrap();
            if let Some(j) = r.matched {
                prop_assert!(r.metric_value >= delta);
                prop_assert!(j < set.len());
            } else {
                prop_assert_eq!(r.metric_value, 1.0);
            }
        }
    }
}
