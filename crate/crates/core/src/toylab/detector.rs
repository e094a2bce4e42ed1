//! The trainable toy detector: a linear head over fixed per-cell features.
//!
//! Every grid cell owns one anchor box. The head maps the cell's features
//! to C+1 class logits (background last) and 4 box offsets encoded
//! relative to the anchor. A cell whose argmax is a foreground class
//! becomes a detection carrying the renormalized foreground distribution;
//! per-class NMS then thins the output.

use thiserror::Error;

use crate::types::{
    AnchorRef, Box2D, ClassDistribution, Detection, DetectionSet, Geometry,
};

use super::scene::ToyScene;

/// SSD-style conventions inherited by the toy stack.
pub const NMS_IOU: f64 = 0.45;
pub const ASSIGN_IOU: f64 = 0.5;
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Offset decode clamp keeping exp() finite under runaway parameters.
const LOG_SIZE_CLAMP: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parameter shapes disagree")]
pub struct ShapeMismatch;

/// Whether head weights are shared across anchors or independent per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    #[default]
    Shared,
    PerCell,
}

/// Structural description of one toy detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorShape {
    /// Foreground classes C; the head has C+1 logits, background last.
    pub classes: usize,
    pub feature_dim: usize,
    pub grid: usize,
    pub head: HeadKind,
    /// Side length of the square anchor box at each cell.
    pub anchor_scale: f64,
}

impl DetectorShape {
    pub fn for_scene(scene: &ToyScene) -> Self {
        Self {
            classes: scene.classes,
            feature_dim: scene.feature_dim,
            grid: scene.grid,
            head: HeadKind::Shared,
            anchor_scale: 3.5,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn logits(&self) -> usize {
        self.classes + 1
    }

    fn head_cells(&self) -> usize {
        match self.head {
            HeadKind::Shared => 1,
            HeadKind::PerCell => self.cells(),
        }
    }

    pub fn cls_len(&self) -> usize {
        self.head_cells() * self.feature_dim * self.logits()
    }

    pub fn loc_len(&self) -> usize {
        self.head_cells() * self.feature_dim * 4
    }

    fn head_cell(&self, cell: usize) -> usize {
        match self.head {
            HeadKind::Shared => 0,
            HeadKind::PerCell => cell,
        }
    }

    /// The anchor box of a cell: a square of side `anchor_scale` centered
    /// on the cell center. It may extend past the grid boundary.
    pub fn anchor_box(&self, cell: usize) -> Box2D {
        let row = cell / self.grid;
        let col = cell % self.grid;
        let cx = col as f64 + 0.5;
        let cy = row as f64 + 0.5;
        let half = self.anchor_scale / 2.0;
        Box2D { x_min: cx - half, y_min: cy - half, x_max: cx + half, y_max: cy + half }
    }

    /// Encode a target box as (dcx, dcy, dw, dh) relative to the anchor.
    pub fn encode(&self, cell: usize, target: &Box2D) -> [f64; 4] {
        let a = self.anchor_box(cell);
        let (acx, acy) = a.center();
        let (tcx, tcy) = target.center();
        [
            (tcx - acx) / a.width(),
            (tcy - acy) / a.height(),
            (target.width() / a.width()).ln(),
            (target.height() / a.height()).ln(),
        ]
    }

    /// Decode predicted offsets into a box; always valid.
    pub fn decode(&self, cell: usize, offsets: &[f64; 4]) -> Box2D {
        let a = self.anchor_box(cell);
        let (acx, acy) = a.center();
        let cx = acx + offsets[0] * a.width();
        let cy = acy + offsets[1] * a.height();
        let w = a.width() * offsets[2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
        let h = a.height() * offsets[3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
        Box2D { x_min: cx - w / 2.0, y_min: cy - h / 2.0, x_max: cx + w / 2.0, y_max: cy + h / 2.0 }
    }
}

/// Learnable parameters: per-head-cell classification and box-offset
/// weights, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetectorParams {
    pub shape: DetectorShape,
    /// Layout: [head_cell][feature][logit].
    pub cls_w: Vec<f64>,
    /// Layout: [head_cell][feature][offset].
    pub loc_w: Vec<f64>,
}

impl ToyDetectorParams {
    pub fn zeros(shape: DetectorShape) -> Self {
        Self { shape, cls_w: vec![0.0; shape.cls_len()], loc_w: vec![0.0; shape.loc_len()] }
    }

    pub fn cls_block(&self, cell: usize) -> &[f64] {
        let len = self.shape.feature_dim * self.shape.logits();
        let start = self.shape.head_cell(cell) * len;
        &self.cls_w[start..start + len]
    }

    pub fn loc_block(&self, cell: usize) -> &[f64] {
        let len = self.shape.feature_dim * 4;
        let start = self.shape.head_cell(cell) * len;
        &self.loc_w[start..start + len]
    }

    pub(crate) fn cls_block_range(&self, cell: usize) -> std::ops::Range<usize> {
        let len = self.shape.feature_dim * self.shape.logits();
        let start = self.shape.head_cell(cell) * len;
        start..start + len
    }

    pub(crate) fn loc_block_range(&self, cell: usize) -> std::ops::Range<usize> {
        let len = self.shape.feature_dim * 4;
        let start = self.shape.head_cell(cell) * len;
        start..start + len
    }

    /// self += scale * other, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<(), ShapeMismatch> {
        if self.cls_w.len() != other.cls_w.len() || self.loc_w.len() != other.loc_w.len() {
            return Err(ShapeMismatch);
        }
        for (a, b) in self.cls_w.iter_mut().zip(&other.cls_w) {
            *a += scale * b;
        }
        for (a, b) in self.loc_w.iter_mut().zip(&other.loc_w) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Exponential moving average of detector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub params: ToyDetectorParams,
}

impl EmaState {
    pub fn new(decay: f64, params: ToyDetectorParams) -> Self {
        assert!((0.0..=1.0).contains(&decay), "decay must lie in [0, 1]");
        Self { decay, params }
    }

    /// new = decay * old + (1 - decay) * student, elementwise.
    pub fn update(&self, student: &ToyDetectorParams) -> Result<EmaState, ShapeMismatch> {
        if self.params.cls_w.len() != student.cls_w.len()
            || self.params.loc_w.len() != student.loc_w.len()
        {
            return Err(ShapeMismatch);
        }
        let d = self.decay;
        let mix = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter().zip(new).map(|(o, s)| d * o + (1.0 - d) * s).collect()
        };
        Ok(EmaState {
            decay: d,
            params: ToyDetectorParams {
                shape: self.params.shape,
                cls_w: mix(&self.params.cls_w, &student.cls_w),
                loc_w: mix(&self.params.loc_w, &student.loc_w),
            },
        })
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        let e = (l - max).exp();
        out.push(e);
        sum += e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn cell_logits(params: &ToyDetectorParams, features: &[f64], cell: usize) -> Vec<f64> {
    let shape = &params.shape;
    let block = params.cls_block(cell);
    let mut logits = vec![0.0; shape.logits()];
    for (f, &x) in features.iter().enumerate() {
        let row = &block[f * shape.logits()..(f + 1) * shape.logits()];
        for (k, &w) in row.iter().enumerate() {
            logits[k] += w * x;
        }
    }
    logits
}

pub(crate) fn cell_offsets(params: &ToyDetectorParams, features: &[f64], cell: usize) -> [f64; 4] {
    let block = params.loc_block(cell);
    let mut offsets = [0.0; 4];
    for (f, &x) in features.iter().enumerate() {
        let row = &block[f * 4..(f + 1) * 4];
        for (k, &w) in row.iter().enumerate() {
            offsets[k] += w * x;
        }
    }
    offsets
}

/// Run the detector over a scene's features.
///
/// Cells whose argmax logit is a foreground class emit a detection with
/// the background-stripped, renormalized distribution, the decoded box,
/// and their anchor id attached; per-class NMS at IoU 0.45 follows.
/// Ground truth is never consulted.
pub fn toy_forward(params: &ToyDetectorParams, scene: &ToyScene) -> DetectionSet {
    toy_forward_features(params, scene.features_flat(), scene.image_id)
}

pub(crate) fn toy_forward_features(
    params: &ToyDetectorParams,
    features: &[f64],
    image_id: i64,
) -> DetectionSet {
    let shape = &params.shape;
    let classes = shape.classes;
    let mut probs = Vec::with_capacity(shape.logits());
    let mut raw: Vec<Detection> = Vec::new();

    for cell in 0..shape.cells() {
        let cell_feats = &features[cell * shape.feature_dim..(cell + 1) * shape.feature_dim];
        let logits = cell_logits(params, cell_feats, cell);
        softmax(&logits, &mut probs);
        let mut argmax = 0;
        for k in 1..probs.len() {
            if probs[k] > probs[argmax] {
                argmax = k;
            }
        }
        if argmax == classes {
            continue; // background
        }
        let fg_mass = 1.0 - probs[classes];
        let dist = ClassDistribution::new(probs[..classes].iter().map(|p| p / fg_mass).collect())
            .expect("renormalized foreground distribution is valid");
        let offsets = cell_offsets(params, cell_feats, cell);
        raw.push(Detection {
            image_id,
            detector_id: 0,
            geometry: Geometry::Planar(shape.decode(cell, &offsets)),
            dist,
            anchor: Some(AnchorRef { anchor_id: cell }),
        });
    }

    let kept = nms_per_class(raw);
    DetectionSet::new(image_id, kept).expect("forward output is homogeneous")
}

/// Greedy per-class NMS: confidence descending (anchor id breaks ties),
/// suppressing boxes whose IoU with a kept same-class box exceeds NMS_IOU.
fn nms_per_class(mut raw: Vec<Detection>) -> Vec<Detection> {
    raw.sort_by(|a, b| {
        b.confidence()
            .partial_cmp(&a.confidence())
            .expect("finite confidences")
            .then(a.anchor.map(|r| r.anchor_id).cmp(&b.anchor.map(|r| r.anchor_id)))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in raw {
        let class = d.argmax_class();
        let boxed = d.geometry.as_planar().expect("toy detections are planar");
        let suppressed = kept.iter().any(|k| {
            k.argmax_class() == class
                && crate::matching::iou_2d(k.geometry.as_planar().unwrap(), boxed) > NMS_IOU
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::scene::{generate_scenes, SceneSpec};

    fn small_shape() -> DetectorShape {
        DetectorShape {
            classes: 3,
            feature_dim: 4,
            grid: 4,
            head: HeadKind::Shared,
            anchor_scale: 3.5,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let shape = small_shape();
        let target = Box2D::new(0.3, 0.7, 3.2, 3.6).unwrap();
        for cell in [0, 5, 15] {
            let decoded = shape.decode(cell, &shape.encode(cell, &target));
            assert!((decoded.x_min - target.x_min).abs() < 1e-12);
            assert!((decoded.y_min - target.y_min).abs() < 1e-12);
            assert!((decoded.x_max - target.x_max).abs() < 1e-12);
            assert!((decoded.y_max - target.y_max).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_emit_uniform_foreground() {
        // uniform logits: argmax ties break to class 0, a foreground
        // class, and the stripped distribution is uniform at 1/C
        let spec = SceneSpec::default();
        let scene = &generate_scenes(1, 1, &spec)[0];
        let params = ToyDetectorParams::zeros(DetectorShape::for_scene(scene));
        let out = toy_forward(&params, scene);
        assert!(!out.is_empty());
        for d in out.iter() {
            assert_eq!(d.argmax_class(), 0);
            assert!((d.confidence() - 1.0 / spec.classes as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_drops_lower_confidence_overlap() {
        // same-class detections at IoU 0.6: only the stronger survives
        let shape = small_shape();
        let mk = |conf: f64, anchor: usize, b: Box2D| Detection {
            image_id: 0,
            detector_id: 0,
            geometry: Geometry::Planar(b),
            dist: ClassDistribution::from_top_score(1, conf, 3).unwrap(),
            anchor: Some(AnchorRef { anchor_id: anchor }),
        };
        let _ = shape;
        let a = mk(0.9, 0, Box2D::new(0.0, 0.0, 10.0, 10.0).unwrap());
        let b = mk(0.8, 1, Box2D::new(0.0, 0.0, 10.0, 6.0).unwrap());
        let kept = nms_per_class(vec![b.clone(), a.clone()]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence(), 0.9);

        // different classes never suppress each other
        let mut c = b.clone();
        c.dist = ClassDistribution::from_top_score(2, 0.8, 3).unwrap();
        assert_eq!(nms_per_class(vec![a, c]).len(), 2);
    }

    #[test]
    fn ema_endpoints() {
        let shape = small_shape();
        let mut old = ToyDetectorParams::zeros(shape);
        old.cls_w.iter_mut().for_each(|v| *v = 1.0);
        old.loc_w.iter_mut().for_each(|v| *v = 1.0);
        let student = ToyDetectorParams::zeros(shape);

        let frozen = EmaState::new(1.0, old.clone()).update(&student).unwrap();
        assert_eq!(frozen.params, old);

        let copied = EmaState::new(0.0, old.clone()).update(&student).unwrap();
        assert_eq!(copied.params, student);

        let mixed = EmaState::new(0.99, old).update(&student).unwrap();
        assert!((mixed.params.cls_w[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn ema_shape_mismatch_is_reported() {
        let a = ToyDetectorParams::zeros(small_shape());
        let b = ToyDetectorParams::zeros(DetectorShape { feature_dim: 6, ..small_shape() });
        assert!(EmaState::new(0.9, a).update(&b).is_err());
    }

    #[test]
    fn anchors_cover_generated_objects() {
        // every generated object overlaps its best anchor at >= 0.5 IoU,
        // so the assignment threshold never orphans a ground-truth box
        let spec = SceneSpec::default();
        let scenes = generate_scenes(33, 200, &spec);
        let shape = DetectorShape::for_scene(&scenes[0]);
        for scene in &scenes {
            for obj in &scene.gt {
                let b = obj.geometry.as_planar().unwrap();
                let best = (0..shape.cells())
                    .map(|cell| crate::matching::iou_2d(&shape.anchor_box(cell), b))
                    .fold(0.0, f64::max);
                assert!(best >= ASSIGN_IOU, "object {b:?} has best anchor IoU {best}");
            }
        }
    }
}
