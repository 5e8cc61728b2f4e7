use serde::Serialize;

use super::matching::ImageMatches;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub map: f64,
    pub warnings: Vec<String>,
}

/// All-points interpolated AP from `(score, is_true_positive)` pairs and the
/// number of ground-truth instances. Ties in score keep input order.
pub fn ap_from_ranked(scored: &[(f64, bool)], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // precision envelope, then area under the step curve
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class AP@`iou` and mAP over a set of matched images.
pub fn average_precision(images: &[ImageMatches], classes: usize) -> ApResult {
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); classes];
    let mut gt = vec![0usize; classes];
    for im in images {
        for d in &im.detections {
            scored[d.class_id].push((d.score, d.ap_true_positive));
        }
        for &c in &im.gt_classes {
            gt[c] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut warnings = Vec::new();
    for c in 0..classes {
        if gt[c] == 0 {
            warnings.push(format!("class {c} has no ground truth; excluded from mAP"));
            per_class.push(None);
        } else {
            per_class.push(Some(ap_from_ranked(&scored[c], gt[c])));
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    ApResult {
        per_class,
        map,
        warnings,
    }
}
