use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::{DenseOutputs, Detector};
use crate::error::Result;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub score: f64,
    /// Grid location (row-major) the detection was decoded from.
    pub location: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Candidates kept (by score) before suppression.
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Higher score first, then lower class, then lexicographically smaller box.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Class-wise greedy suppression. The survivors come back in
/// [`detection_order`].
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::kernels::sigmoid(x)
}

/// Per-location class probabilities `[Hs*Ws, C]` from raw head outputs.
pub fn class_probabilities(cls: &Array, classes: usize, softmax: bool) -> Array {
    let k = cls.shape()[cls.ndim() - 1];
    let rows = cls.len() / k;
    let mut out = Vec::with_capacity(rows * classes);
    for row in cls.data().chunks(k) {
        if softmax {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.extend(row[..classes].iter().map(|v| (v - m).exp() / z));
        } else {
            out.extend(row[..classes].iter().map(|&v| sigmoid(v)));
        }
    }
    Array::new(vec![rows, classes], out).expect("consistent length")
}

/// Turns dense outputs into final detections for an `image_size` square
/// image. Scores are class probability times `sigmoid(centerness)`.
pub fn decode_detections(
    outputs: &DenseOutputs,
    classes: usize,
    softmax: bool,
    image_size: usize,
    cfg: &InferConfig,
) -> Vec<Detection> {
    let probs = class_probabilities(&outputs.cls, classes, softmax);
    let grid = outputs.grid;
    let s = grid.stride as f64;
    let limit = image_size as f64;
    let mut candidates = Vec::new();
    for loc in 0..grid.len() {
        let ctr = sigmoid(outputs.ctr.data()[loc]);
        for (c, &p) in probs.row(loc).iter().enumerate() {
            let score = (p * ctr).clamp(0.0, 1.0);
            if score > cfg.score_threshold {
                let (x, y) = grid.center(loc);
                let o = &outputs.reg.data()[loc * 4..loc * 4 + 4];
                let bbox = [
                    (x - o[0] * s).clamp(0.0, limit),
                    (y - o[1] * s).clamp(0.0, limit),
                    (x + o[2] * s).clamp(0.0, limit),
                    (y + o[3] * s).clamp(0.0, limit),
                ];
                candidates.push(Detection {
                    bbox,
                    class_id: c,
                    score,
                    location: loc,
                });
            }
        }
    }
    candidates.sort_by(detection_order);
    candidates.truncate(cfg.pre_nms_top_k);
    let mut kept = nms(candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

impl Detector {
    pub fn infer(&self, image: &Array, cfg: &InferConfig) -> Result<Vec<Detection>> {
        let out = self.predict(image)?;
        Ok(decode_detections(
            &out,
            self.classes(),
            self.config().head.is_softmax(),
            self.image_size(),
            cfg,
        ))
    }
}
