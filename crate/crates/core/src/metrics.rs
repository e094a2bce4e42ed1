//! Pseudo-label quality metrics, VOC-style AP50 evaluation, and the
//! pseudo-label ablation transforms.
//!
//! Everything here operates on 2d geometry. Precision-style metrics
//! validate each pseudo box against its best-overlapping ground truth box
//! (many-to-one), while AP uses the usual greedy one-to-one protocol.

use rand::Rng;

use crate::matching::{iou_2d, match_sets};
use crate::types::{
    DetectionSet, Geometry, GroundTruthBox, MatchConfig, PseudoBox,
};

/// Metrics accumulated over one window of training iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMetrics {
    pub window_index: usize,
    /// TP / (TP + FP) over the window; `None` when no pseudo boxes exist.
    pub pseudo_precision: Option<f64>,
    /// Mean number of correctly classified pseudo boxes per iteration.
    pub correct_count: f64,
    /// Mean KL divergence between matched probability vectors.
    pub mean_kl: f64,
    pub pseudo_total: usize,
}

/// Ablation transforms applied to generated pseudo labels before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationKind {
    #[default]
    None,
    /// Keep true positives, drop false positives.
    DiscardFp,
    /// Resample every false positive's class uniformly over all classes.
    RandomFp,
    /// Replace every matched box's class with its ground-truth class;
    /// boxes without a counterpart are dropped.
    GtLabels,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::None,
        AblationKind::DiscardFp,
        AblationKind::RandomFp,
        AblationKind::GtLabels,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::None => "none",
            AblationKind::DiscardFp => "discard_fp",
            AblationKind::RandomFp => "random_fp",
            AblationKind::GtLabels => "gt_labels",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

fn planar(geometry: &Geometry) -> &crate::types::Box2D {
    geometry
        .as_planar()
        .expect("quality metrics are defined for 2d geometry only")
}

/// Index and IoU of the ground-truth box overlapping `geometry` the most.
fn best_gt(geometry: &Geometry, gt: &[GroundTruthBox]) -> Option<(usize, f64)> {
    let b = planar(geometry);
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in gt.iter().enumerate() {
        let v = iou_2d(b, planar(&g.geometry));
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((k, v));
        }
    }
    best
}

/// Flags each pseudo box TP or FP: TP iff the best-IoU ground-truth box
/// overlaps at least `iou_thr` and carries the same class. Ground-truth
/// boxes may validate any number of pseudo boxes.
pub fn classify_pseudo(pseudo: &[PseudoBox], gt: &[GroundTruthBox], iou_thr: f64) -> Vec<bool> {
    pseudo
        .iter()
        .map(|p| match best_gt(&p.geometry, gt) {
            Some((k, v)) => v >= iou_thr && gt[k].class_index == p.class_index,
            None => false,
        })
        .collect()
}

/// TP / (TP + FP); `None` when there are no pseudo boxes.
pub fn pseudo_precision(pseudo: &[PseudoBox], gt: &[GroundTruthBox], iou_thr: f64) -> Option<f64> {
    if pseudo.is_empty() {
        return None;
    }
    let tp = classify_pseudo(pseudo, gt, iou_thr)
        .iter()
        .filter(|&&f| f)
        .count();
    Some(tp as f64 / pseudo.len() as f64)
}

/// Number of correctly classified pseudo boxes.
pub fn correct_count(pseudo: &[PseudoBox], gt: &[GroundTruthBox], iou_thr: f64) -> usize {
    classify_pseudo(pseudo, gt, iou_thr)
        .iter()
        .filter(|&&f| f)
        .count()
}

/// Ground truth of one image, keyed for joint AP evaluation.
#[derive(Debug, Clone)]
pub struct ImageGroundTruth {
    pub image_id: i64,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApStyle {
    /// Mean of the max precision at recalls {0, 0.1, ..., 1.0}.
    #[default]
    Voc07Eleven,
    /// Area under the monotonized precision-recall curve.
    AllPoint,
}

impl ApStyle {
    pub fn name(&self) -> &'static str {
        match self {
            ApStyle::Voc07Eleven => "voc07_11pt",
            ApStyle::AllPoint => "all_point",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "voc07_11pt" => Some(ApStyle::Voc07Eleven),
            "all_point" => Some(ApStyle::AllPoint),
            _ => None,
        }
    }
}

/// AP at IoU 0.5, averaged over the classes that have at least one
/// ground-truth box. Detections are ranked by confidence and matched
/// one-to-one to unmatched ground truth, greedily per class.
pub fn ap50(detections: &[DetectionSet], gt: &[ImageGroundTruth], style: ApStyle) -> f64 {
    ap_at_iou(detections, gt, 0.5, style)
}

pub fn ap_at_iou(
    detections: &[DetectionSet],
    gt: &[ImageGroundTruth],
    iou_thr: f64,
    style: ApStyle,
) -> f64 {
    let classes = gt
        .iter()
        .flat_map(|g| g.boxes.iter().map(|b| b.class_index))
        .max()
        .map(|c| c + 1)
        .unwrap_or(0);
    let mut class_has_gt = vec![false; classes];
    for g in gt {
        for b in &g.boxes {
            class_has_gt[b.class_index] = true;
        }
    }
    if !class_has_gt.iter().any(|&f| f) {
        return 0.0;
    }

    let mut sum = 0.0;
    let mut counted = 0usize;
    for class in 0..classes {
        if !class_has_gt[class] {
            continue;
        }
        sum += class_ap(detections, gt, class, iou_thr, style);
        counted += 1;
    }
    sum / counted as f64
}

fn class_ap(
    detections: &[DetectionSet],
    gt: &[ImageGroundTruth],
    class: usize,
    iou_thr: f64,
    style: ApStyle,
) -> f64 {
    // (image slot, confidence, geometry), ranked by confidence
    let mut ranked: Vec<(usize, f64, Geometry)> = Vec::new();
    let mut gt_count = 0usize;
    let image_index = |id: i64| gt.iter().position(|g| g.image_id == id);

    for g in gt {
        gt_count += g.boxes.iter().filter(|b| b.class_index == class).count();
    }
    if gt_count == 0 {
        return 0.0;
    }
    for set in detections {
        let Some(slot) = image_index(set.image_id()) else { continue };
        for d in set.iter() {
            if d.argmax_class() == class {
                ranked.push((slot, d.confidence(), d.geometry));
            }
        }
    }
    if ranked.is_empty() {
        return 0.0;
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite confidences"));

    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (slot, _, geometry) in &ranked {
        let candidates = &gt[*slot].boxes;
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in candidates.iter().enumerate() {
            if g.class_index != class {
                continue;
            }
            let v = iou_2d(planar(geometry), planar(&g.geometry));
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        let hit = match best {
            Some((k, v)) if v >= iou_thr && !used[*slot][k] => {
                used[*slot][k] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(hit);
    }

    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / gt_count as f64);
    }

    match style {
        ApStyle::Voc07Eleven => {
            let mut total = 0.0;
            for step in 0..=10 {
                let r = step as f64 / 10.0;
                let p = precisions
                    .iter()
                    .zip(&recalls)
                    .filter(|(_, &rec)| rec >= r)
                    .map(|(&p, _)| p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
        ApStyle::AllPoint => {
            // monotonize precision from the right, then integrate
            let mut mono = precisions.clone();
            for i in (0..mono.len().saturating_sub(1)).rev() {
                mono[i] = mono[i].max(mono[i + 1]);
            }
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (p, r) in mono.iter().zip(&recalls) {
                area += (r - prev_recall) * p;
                prev_recall = *r;
            }
            area
        }
    }
}

/// Mean KL divergence KL(p_a || p_b) over non-virtually matched pairs,
/// with probabilities clamped below at 1e-12; 0 when nothing matches.
pub fn mean_kl(
    set_a: &DetectionSet,
    set_b: &DetectionSet,
    cfg: &MatchConfig,
) -> Result<f64, crate::matching::MatchError> {
    const CLAMP: f64 = 1e-12;
    let matches = match_sets(set_a, set_b, cfg)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for m in &matches {
        let Some(j) = m.matched else { continue };
        let p = set_a.detections()[m.query_index].dist.probs();
        let q = set_b.detections()[j].dist.probs();
        let mut kl = 0.0;
        for (a, b) in p.iter().zip(q) {
            let a = a.max(CLAMP);
            let b = b.max(CLAMP);
            kl += a * (a / b).ln();
        }
        total += kl.max(0.0);
        pairs += 1;
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Apply an ablation transform to generated pseudo labels, consulting the
/// ground truth of the same image. TP/FP status is decided at IoU 0.5.
pub fn ablate<R: Rng>(
    pseudo: &[PseudoBox],
    gt: &[GroundTruthBox],
    kind: AblationKind,
    num_classes: usize,
    rng: &mut R,
) -> Vec<PseudoBox> {
    match kind {
        AblationKind::None => pseudo.to_vec(),
        AblationKind::DiscardFp => {
            let flags = classify_pseudo(pseudo, gt, 0.5);
            pseudo
                .iter()
                .zip(flags)
                .filter(|(_, tp)| *tp)
                .map(|(p, _)| p.clone())
                .collect()
        }
        AblationKind::RandomFp => {
            let flags = classify_pseudo(pseudo, gt, 0.5);
            pseudo
                .iter()
                .zip(flags)
                .map(|(p, tp)| {
                    if tp {
                        p.clone()
                    } else {
                        let mut out = p.clone();
                        out.class_index = rng.random_range(0..num_classes);
                        out
                    }
                })
                .collect()
        }
        AblationKind::GtLabels => pseudo
            .iter()
            .filter_map(|p| match best_gt(&p.geometry, gt) {
                Some((k, v)) if v >= 0.5 => {
                    let mut out = p.clone();
                    out.class_index = gt[k].class_index;
                    Some(out)
                }
                _ => None,
            })
            .collect(),
    }
}
