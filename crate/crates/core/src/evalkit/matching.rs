use std::cmp::Ordering;

use serde::Serialize;

use crate::detector::{detection_order, iou, Detection};
use crate::synthgen::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Claimed a ground-truth box of its own class.
    Correct,
    /// Claimed a ground-truth box of another class.
    Confused,
    /// Claimed nothing.
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetMatch {
    pub class_id: usize,
    pub score: f64,
    pub location: usize,
    /// Ground truth claimed under cross-class matching.
    pub gt: Option<usize>,
    pub outcome: Outcome,
    /// True positive under per-class matching, the basis of AP.
    pub ap_true_positive: bool,
}

/// Matching results for one image. `detections` follows
/// [`detection_order`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMatches {
    pub detections: Vec<DetMatch>,
    pub gt_classes: Vec<usize>,
    /// Detection (index into `detections`) that claimed each ground truth.
    pub gt_claimed_by: Vec<Option<usize>>,
}

fn best_candidate<'a>(
    dets_box: &[f64; 4],
    gts: impl Iterator<Item = (usize, &'a Annotation)>,
    iou_thresh: f64,
) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (k, a) in gts {
        let o = iou(dets_box, &a.bbox);
        if o >= iou_thresh && best.is_none_or(|(b, _)| o.partial_cmp(&b) == Some(Ordering::Greater)) {
            best = Some((o, k));
        }
    }
    best.map(|(_, k)| k)
}

/// Greedy matching in descending score order.
///
/// Two matchings are computed. Cross-class matching lets each detection
/// claim the unclaimed box with the highest IoU (at least `iou_thresh`),
/// preferring boxes of its own class; claiming another class's box is a
/// confusion rather than a miss plus a false positive. Per-class matching
/// only considers boxes of the detection's class and decides AP true
/// positives.
pub fn match_detections(
    detections: &[Detection],
    annotations: &[Annotation],
    iou_thresh: f64,
) -> ImageMatches {
    let mut dets = detections.to_vec();
    dets.sort_by(detection_order);
    let n = annotations.len();
    let mut cross = vec![None; n];
    let mut per_class = vec![false; n];
    let mut out = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let free = || annotations.iter().enumerate().filter(|(k, _)| cross[*k].is_none());
        let own = best_candidate(&d.bbox, free().filter(|(_, a)| a.class_id == d.class_id), iou_thresh);
        let (gt, outcome) = match own {
            Some(k) => (Some(k), Outcome::Correct),
            None => match best_candidate(&d.bbox, free(), iou_thresh) {
                Some(k) => (Some(k), Outcome::Confused),
                None => (None, Outcome::Background),
            },
        };
        if let Some(k) = gt {
            cross[k] = Some(i);
        }
        let ap_gt = best_candidate(
            &d.bbox,
            annotations
                .iter()
                .enumerate()
                .filter(|(k, a)| a.class_id == d.class_id && !per_class[*k]),
            iou_thresh,
        );
        if let Some(k) = ap_gt {
            per_class[k] = true;
        }
        out.push(DetMatch {
            class_id: d.class_id,
            score: d.score,
            location: d.location,
            gt,
            outcome,
            ap_true_positive: ap_gt.is_some(),
        });
    }
    ImageMatches {
        detections: out,
        gt_classes: annotations.iter().map(|a| a.class_id).collect(),
        gt_claimed_by: cross,
    }
}
