//! Pseudo-label generation strategies.
//!
//! All strategies are one-directional: they produce the pseudo labels for
//! the query detector (the first argument). Labels for the counterpart are
//! obtained by calling again with the arguments swapped.

use crate::matching::{match_sets, MatchError, MatchResult};
use crate::types::{
    Detection, DetectionSet, Geometry, MatchConfig, NoMatchPolicy, PseudoBox,
};

/// The pseudo-label rectification strategies this crate implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    /// Keep the query detector's own thresholded predictions.
    SelfLabel,
    /// Resolve matched disagreements by keeping the higher-confidence
    /// prediction.
    CrossRectify,
    /// Average probability vectors and coordinates of matched pairs.
    CoRectify,
    /// Take the counterpart detector's predictions wholesale.
    Cps,
    /// Keep only matched pairs that agree on the class.
    Intersection,
    /// Keep only matched pairs that disagree on the class.
    Difference,
    /// Plurality vote over N detectors with averaged coordinates.
    Majority,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::SelfLabel,
        StrategyKind::CrossRectify,
        StrategyKind::CoRectify,
        StrategyKind::Cps,
        StrategyKind::Intersection,
        StrategyKind::Difference,
        StrategyKind::Majority,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::SelfLabel => "self_label",
            StrategyKind::CrossRectify => "cross_rectify",
            StrategyKind::CoRectify => "co_rectify",
            StrategyKind::Cps => "cps",
            StrategyKind::Intersection => "intersection",
            StrategyKind::Difference => "difference",
            StrategyKind::Majority => "majority",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|s| s.name() == name)
    }
}

/// Which side's label supervises a disagreeing matched pair in the
/// difference-set strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisagreementLabel {
    #[default]
    Query,
    Counterpart,
}

/// Keep exactly the detections with confidence strictly greater than `tau`,
/// preserving order.
pub fn threshold_filter(set: &DetectionSet, tau: f64) -> DetectionSet {
    let kept: Vec<Detection> = set
        .iter()
        .filter(|d| d.confidence() > tau)
        .cloned()
        .collect();
    DetectionSet::new(set.image_id(), kept).expect("filtering preserves set invariants")
}

fn pseudo_from(detection: &Detection) -> PseudoBox {
    PseudoBox {
        class_index: detection.argmax_class(),
        geometry: detection.geometry,
        source_confidence: detection.confidence(),
    }
}

/// Thresholded self-labeling: each surviving detection becomes a pseudo box
/// with its own argmax class and geometry.
pub fn self_label(set: &DetectionSet, tau: f64) -> Vec<PseudoBox> {
    threshold_filter(set, tau).iter().map(pseudo_from).collect()
}

/// Taking the counterpart detector's thresholded predictions wholesale
/// (cross pseudo supervision). No matching is involved.
pub fn cps_label(set_other: &DetectionSet, tau: f64) -> Vec<PseudoBox> {
    self_label(set_other, tau)
}

fn filtered_match(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    tau: f64,
    cfg: &MatchConfig,
) -> Result<(DetectionSet, DetectionSet, Vec<MatchResult>), MatchError> {
    let kept_a = threshold_filter(set_a, tau);
    let kept_b = threshold_filter(set_b, tau);
    let matches = match_sets(&kept_a, &kept_b, cfg)?;
    Ok((kept_a, kept_b, matches))
}

/// Cross-rectification: for every query box, compare confidences with its
/// best match and keep the higher-confidence prediction. Virtual matches
/// keep the query's own prediction (the strict `<` fails on the implied
/// confidence tie).
pub fn cross_rectify_pair(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    tau: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PseudoBox>, MatchError> {
    let (kept_a, kept_b, matches) = filtered_match(set_a, set_b, tau, cfg)?;
    let mut out = Vec::with_capacity(matches.len());
    for m in &matches {
        let query = &kept_a.detections()[m.query_index];
        match m.matched {
            Some(j) => {
                let counterpart = &kept_b.detections()[j];
                if query.confidence() < counterpart.confidence() {
                    out.push(pseudo_from(counterpart));
                } else {
                    out.push(pseudo_from(query));
                }
            }
            None => {
                if cfg.on_no_match == NoMatchPolicy::Virtual {
                    out.push(pseudo_from(query));
                }
            }
        }
    }
    Ok(out)
}

/// Co-rectification: average the probability vector and geometry of each
/// matched pair; class is the argmax of the averaged vector. A virtual
/// match averages the query with itself, which is a no-op.
pub fn co_rectify_pair(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    tau: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PseudoBox>, MatchError> {
    let (kept_a, kept_b, matches) = filtered_match(set_a, set_b, tau, cfg)?;
    let mut out = Vec::with_capacity(matches.len());
    for m in &matches {
        let query = &kept_a.detections()[m.query_index];
        match m.matched {
            Some(j) => {
                let counterpart = &kept_b.detections()[j];
                let dist = query
                    .dist
                    .mean(&counterpart.dist)
                    .expect("matched detections share the class count");
                let geometry = query
                    .geometry
                    .mean(&counterpart.geometry)
                    .expect("matched detections share the geometry variant");
                out.push(PseudoBox {
                    class_index: dist.argmax(),
                    geometry,
                    source_confidence: dist.max_prob(),
                });
            }
            None => {
                if cfg.on_no_match == NoMatchPolicy::Virtual {
                    out.push(pseudo_from(query));
                }
            }
        }
    }
    Ok(out)
}

/// Intersection of the two prediction sets: keep a matched pair only when
/// both members predict the same class. The query's geometry is kept.
pub fn intersection_label(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    tau: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PseudoBox>, MatchError> {
    let (kept_a, kept_b, matches) = filtered_match(set_a, set_b, tau, cfg)?;
    let mut out = Vec::new();
    for m in &matches {
        let Some(j) = m.matched else { continue };
        let query = &kept_a.detections()[m.query_index];
        let counterpart = &kept_b.detections()[j];
        if query.argmax_class() == counterpart.argmax_class() {
            out.push(pseudo_from(query));
        }
    }
    Ok(out)
}

/// Difference set of the two prediction sets: keep a matched pair only when
/// the two members disagree on the class. By default the query's own label
/// and geometry supervise; `source` selects the counterpart's label instead.
pub fn difference_label_from(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    tau: f64,
    cfg: &MatchConfig,
    source: DisagreementLabel,
) -> Result<Vec<PseudoBox>, MatchError> {
    let (kept_a, kept_b, matches) = filtered_match(set_a, set_b, tau, cfg)?;
    let mut out = Vec::new();
    for m in &matches {
        let Some(j) = m.matched else { continue };
        let query = &kept_a.detections()[m.query_index];
        let counterpart = &kept_b.detections()[j];
        if query.argmax_class() != counterpart.argmax_class() {
            let class_index = match source {
                DisagreementLabel::Query => query.argmax_class(),
                DisagreementLabel::Counterpart => counterpart.argmax_class(),
            };
            out.push(PseudoBox {
                class_index,
                geometry: query.geometry,
                source_confidence: query.confidence(),
            });
        }
    }
    Ok(out)
}

/// `difference_label_from` with the query's own label.
pub fn difference_label(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    tau: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PseudoBox>, MatchError> {
    difference_label_from(set_a, set_b, tau, cfg, DisagreementLabel::Query)
}

/// Majority rectification over N >= 2 detectors.
///
/// For each box of the first set, its best match in every other set casts a
/// vote (virtual matches contribute the query itself). The pseudo class is
/// the plurality class; vote ties resolve by the highest mean confidence
/// among the tied classes, then the lowest class index. The pseudo geometry
/// is the coordinatewise mean of all N matched geometries.
pub fn majority_rectify(
    sets: &[DetectionSet],
    tau: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PseudoBox>, MatchError> {
    assert!(sets.len() >= 2, "majority rectification needs at least 2 detectors");
    let kept: Vec<DetectionSet> = sets.iter().map(|s| threshold_filter(s, tau)).collect();
    let queries = &kept[0];
    let mut out = Vec::with_capacity(queries.len());
    for query in queries.iter() {
        let mut members: Vec<Detection> = vec![query.clone()];
        let mut all_real = true;
        for other in &kept[1..] {
            let m = crate::matching::best_match(query, other, cfg)?;
            match m.matched {
                Some(j) => members.push(other.detections()[j].clone()),
                None => {
                    all_real = false;
                    members.push(query.clone());
                }
            }
        }
        if cfg.on_no_match == NoMatchPolicy::Drop && !all_real {
            continue;
        }
        out.push(vote(&members));
    }
    Ok(out)
}

fn vote(members: &[Detection]) -> PseudoBox {
    let classes = members[0].dist.num_classes();
    let mut counts = vec![0usize; classes];
    let mut conf_sums = vec![0.0f64; classes];
    for member in members {
        let c = member.argmax_class();
        counts[c] += 1;
        conf_sums[c] += member.confidence();
    }
    let top_count = *counts.iter().max().expect("at least one vote");
    let mut winner = None;
    let mut winner_mean = f64::MIN;
    for c in 0..classes {
        if counts[c] != top_count {
            continue;
        }
        let mean = conf_sums[c] / counts[c] as f64;
        if winner.is_none() || mean > winner_mean {
            winner = Some(c);
            winner_mean = mean;
        }
    }
    let class_index = winner.expect("top count exists");
    let geoms: Vec<Geometry> = members.iter().map(|m| m.geometry).collect();
    PseudoBox {
        class_index,
        geometry: Geometry::mean_of(&geoms).expect("members share the geometry variant"),
        source_confidence: winner_mean,
    }
}

/// Apply `strategy` from the viewpoint of detector `query_index` over the
/// detectors' prediction sets for one image. Pair strategies run against
/// the other detector; `Majority` votes over all of them.
pub fn apply_strategy(
    strategy: StrategyKind,
    sets: &[DetectionSet],
    query_index: usize,
    tau: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PseudoBox>, MatchError> {
    assert!(query_index < sets.len());
    let query_set = &sets[query_index];
    match strategy {
        StrategyKind::SelfLabel => Ok(self_label(query_set, tau)),
        StrategyKind::Cps => {
            assert_eq!(sets.len(), 2, "cps needs exactly 2 detectors");
            Ok(cps_label(&sets[1 - query_index], tau))
        }
        StrategyKind::CrossRectify => {
            assert_eq!(sets.len(), 2, "cross_rectify needs exactly 2 detectors");
            cross_rectify_pair(query_set, &sets[1 - query_index], tau, cfg)
        }
        StrategyKind::CoRectify => {
            assert_eq!(sets.len(), 2, "co_rectify needs exactly 2 detectors");
            co_rectify_pair(query_set, &sets[1 - query_index], tau, cfg)
        }
        StrategyKind::Intersection => {
            assert_eq!(sets.len(), 2, "intersection needs exactly 2 detectors");
            intersection_label(query_set, &sets[1 - query_index], tau, cfg)
        }
        StrategyKind::Difference => {
            assert_eq!(sets.len(), 2, "difference needs exactly 2 detectors");
            difference_label(query_set, &sets[1 - query_index], tau, cfg)
        }
        StrategyKind::Majority => {
            let mut ordered = Vec::with_capacity(sets.len());
            ordered.push(sets[query_index].clone());
            for (k, s) in sets.iter().enumerate() {
                if k != query_index {
                    ordered.push(s.clone());
                }
            }
            majority_rectify(&ordered, tau, cfg)
        }
    }
}
