//! Candidate view generation and cropping metrics.
//!
//! Sliding windows are placed per (scale, aspect-ratio) pair on a regular
//! anchor grid, then thinned by greedy NMS. `scale` is the square root of the
//! window's area fraction, so every aspect ratio covers the same area at a
//! given scale. Metrics: IoU, boundary displacement (mean absolute edge
//! offset), and Top-1 max IoU for multi-annotation images.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Sliding-window generator parameters.
///
/// Defaults match the common search setup: seven scales from 0.6 to 0.9 and
/// five aspect ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlidingWindowConfig {
    /// Square roots of area fractions, ascending, each in (0, 1].
    pub scales: Vec<f64>,
    /// (w, h) ratio pairs.
    pub aspect_ratios: Vec<(f64, f64)>,
    /// Anchor step in normalized coordinates.
    pub stride: f64,
    /// Greedy suppression threshold in (0, 1].
    pub nms_iou_threshold: f64,
    /// Windows below this area fraction of the image are discarded.
    #[serde(default)]
    pub min_coverage: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            scales: vec![0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9],
            aspect_ratios: vec![
                (1.0, 1.0),
                (3.0, 4.0),
                (4.0, 3.0),
                (9.0, 16.0),
                (16.0, 9.0),
            ],
            stride: 0.05,
            nms_iou_threshold: 1.0,
            min_coverage: 0.0,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::invalid("window config: empty scales or ratios"));
        }
        if self.scales.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("window config: scales must be ascending"));
        }
        if self.scales.iter().any(|&s| s <= 0.0 || s > 1.0) {
            return Err(Error::invalid("window config: scales must lie in (0, 1]"));
        }
        if self.stride <= 0.0 || self.stride > 1.0 {
            return Err(Error::invalid("window config: stride must lie in (0, 1]"));
        }
        if self.nms_iou_threshold <= 0.0 || self.nms_iou_threshold > 1.0 {
            return Err(Error::invalid(
                "window config: nms threshold must lie in (0, 1]",
            ));
        }
        if self.aspect_ratios.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
            return Err(Error::invalid("window config: ratios must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth crop annotation for one image (one box for single-annotator
/// data, several for multi-annotator data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    #[serde(rename = "boxes")]
    pub gt_boxes: Vec<[f64; 4]>,
}

impl Annotation {
    pub fn boxes(&self) -> Result<Vec<BBox>> {
        if self.gt_boxes.is_empty() {
            return Err(Error::Data(format!(
                "annotation {} has no boxes",
                self.image_id
            )));
        }
        self.gt_boxes.iter().map(|&a| BBox::from_array(a)).collect()
    }
}

/// Window extent for one (scale, ratio): solves `w/h = ratio`,
/// `w*h = scale^2`, re-solving against whichever side clips at 1.
fn window_shape(scale: f64, ratio_w: f64, ratio_h: f64) -> (f64, f64) {
    let r = ratio_w / ratio_h;
    let mut w = scale * r.sqrt();
    let mut h = scale / r.sqrt();
    if w > 1.0 {
        w = 1.0;
        h = scale * scale;
    } else if h > 1.0 {
        h = 1.0;
        w = scale * scale;
    }
    (w, h)
}

/// Anchor positions along one axis: multiples of `stride` while the window
/// fits, plus a final anchor flush with the far edge.
fn anchors(extent: f64, stride: f64) -> Vec<f64> {
    let span = 1.0 - extent;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let a = k as f64 * stride;
        if a > span + 1e-12 {
            break;
        }
        out.push(a);
        k += 1;
    }
    if let Some(&last) = out.last() {
        if span - last > 1e-9 {
            out.push(span);
        }
    } else {
        out.push(span.max(0.0));
    }
    out
}

/// Generates candidate windows: scale-major, then ratio, row, column order;
/// near-duplicates (any edge within 1e-9) removed; windows below
/// `min_coverage` area fraction discarded; greedy NMS applied last.
pub fn generate_windows(cfg: &SlidingWindowConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    let mut raw: Vec<BBox> = Vec::new();
    for &scale in &cfg.scales {
        for &(rw, rh) in &cfg.aspect_ratios {
            let (w, h) = window_shape(scale, rw, rh);
            if w * h < cfg.min_coverage {
                continue;
            }
            for &y in &anchors(h, cfg.stride) {
                for &x in &anchors(w, cfg.stride) {
                    let b = BBox {
                        x0: x,
                        y0: y,
                        x1: (x + w).min(1.0),
                        y1: (y + h).min(1.0),
                    };
                    if b.validate().is_ok() && !raw.iter().any(|q| q.approx_eq(&b, 1e-9)) {
                        raw.push(b);
                    }
                }
            }
        }
    }
    Ok(nms(&raw, cfg.nms_iou_threshold))
}

/// Greedy non-maximum suppression in input order: a box is kept iff its IoU
/// with every previously kept box is below the threshold.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut kept: Vec<BBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(k, b) < iou_threshold) {
            kept.push(*b);
        }
    }
    kept
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean absolute offset of the four corresponding edges.
pub fn boundary_displacement(a: &BBox, b: &BBox) -> f64 {
    ((a.x0 - b.x0).abs() + (a.y0 - b.y0).abs() + (a.x1 - b.x1).abs() + (a.y1 - b.y1).abs()) / 4.0
}

/// Best IoU of a predicted crop against any of an image's annotations.
pub fn top1_max_iou(pred: &BBox, ann: &Annotation) -> Result<f64> {
    let gts = ann.boxes()?;
    Ok(gts
        .iter()
        .map(|g| iou(pred, g))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Box at the argmax score; ties break toward the lowest index.
pub fn pick_best_view(boxes: &[BBox], scores: &[f64]) -> Result<BBox> {
    if boxes.is_empty() || boxes.len() != scores.len() {
        return Err(Error::invalid(format!(
            "pick_best_view: {} boxes vs {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(boxes[best])
}
