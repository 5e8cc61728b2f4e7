//! Training objectives for the dense detector.

use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, Var, NORM_EPS};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// A scalar loss node together with the count it was normalised by.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub value: Var,
    pub normalizer: f64,
    /// Set when there was nothing to constrain and the loss is a constant 0.
    pub skipped: bool,
}

impl LossValue {
    fn new(value: Var, normalizer: f64) -> Self {
        LossValue {
            value,
            normalizer,
            skipped: false,
        }
    }
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Sigmoid focal loss over `[M, C]` logits.
///
/// Each target row is one-hot (a positive location of that class) or all
/// zero (background, a negative for every class). The summed loss is divided
/// by the number of positive rows, at least 1.
pub fn sigmoid_focal_loss(
    g: &mut Graph,
    logits: Var,
    targets: &Array,
    alpha: f64,
    gamma: f64,
) -> Result<LossValue> {
    if !(alpha > 0.0 && alpha < 1.0) || gamma < 0.0 {
        return Err(Error::contract(format!(
            "focal loss needs alpha in (0, 1) and gamma >= 0, got {alpha}, {gamma}"
        )));
    }
    check_finite(g, logits, "focal loss logits")?;
    if targets.ndim() != 2 {
        return Err(Error::contract("focal targets must be [M, C]"));
    }
    let mut positives = 0usize;
    for row in targets.rows() {
        if row.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::contract("focal targets must be 0 or 1"));
        }
        match row.iter().filter(|&&t| t == 1.0).count() {
            0 => {}
            1 => positives += 1,
            _ => return Err(Error::contract("focal target row has several positives")),
        }
    }
    let normalizer = positives.max(1) as f64;
    let value = g.sigmoid_focal_loss(logits, targets, alpha, gamma, normalizer)?;
    Ok(LossValue::new(value, normalizer))
}

/// Softmax cross-entropy over `[M, C + 1]` logits; label `C` is background.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<LossValue> {
    check_finite(g, logits, "cross-entropy logits")?;
    let value = g.softmax_cross_entropy(logits, labels)?;
    Ok(LossValue::new(value, labels.len().max(1) as f64))
}

/// Orthogonal projection loss on foreground features.
///
/// With `s` the mean cosine over same-class pairs and `d` the mean cosine
/// over different-class pairs, the loss is `(1 - s) + |d|`. A term whose pair
/// set is empty contributes nothing; fewer than two samples gives a skipped
/// zero loss.
pub fn opl_loss(g: &mut Graph, features: Var, labels: &[usize]) -> Result<LossValue> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "opl: features {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let m = labels.len();
    if m < 2 {
        let zero = g.constant(Array::scalar(0.0));
        return Ok(LossValue {
            value: zero,
            normalizer: 1.0,
            skipped: true,
        });
    }
    let mut same = Array::zeros(vec![m, m]);
    let mut diff = Array::zeros(vec![m, m]);
    let (mut n_same, mut n_diff) = (0usize, 0usize);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same.data_mut()[i * m + j] = 1.0;
                n_same += 1;
            } else {
                diff.data_mut()[i * m + j] = 1.0;
                n_diff += 1;
            }
        }
    }
    let unit = g.l2_normalize(features, NORM_EPS)?;
    let unit_t = g.transpose(unit)?;
    let gram = g.matmul(unit, unit_t)?;
    let mut terms = Vec::new();
    if n_same > 0 {
        let mask = g.constant(same);
        let masked = g.mul(gram, mask)?;
        let total = g.sum(masked)?;
        let s = g.scale(total, -1.0 / n_same as f64)?;
        terms.push(g.add_scalar(s, 1.0)?);
    }
    if n_diff > 0 {
        let mask = g.constant(diff);
        let masked = g.mul(gram, mask)?;
        let total = g.sum(masked)?;
        let d = g.scale(total, 1.0 / n_diff as f64)?;
        terms.push(g.abs(d)?);
    }
    let value = match terms[..] {
        [a] => a,
        [a, b] => g.add(a, b)?,
        _ => unreachable!("m >= 2 gives at least one pair"),
    };
    Ok(LossValue::new(value, (n_same + n_diff) as f64))
}

/// Mean `1 - GIoU` between predicted `[M, 4]` boxes and fixed targets.
pub fn giou_loss(g: &mut Graph, pred_boxes: Var, gt_boxes: &Array) -> Result<LossValue> {
    for b in gt_boxes.rows() {
        if b.len() != 4 || !(b[2] > b[0] && b[3] > b[1]) {
            return Err(Error::contract(format!("degenerate ground-truth box {b:?}")));
        }
    }
    check_finite(g, pred_boxes, "predicted boxes")?;
    let value = g.giou_loss(pred_boxes, gt_boxes)?;
    Ok(LossValue::new(value, gt_boxes.shape()[0] as f64))
}

/// Binary cross-entropy of `sigmoid(pred)` against centerness targets.
pub fn centerness_loss(g: &mut Graph, pred: Var, targets: &Array) -> Result<LossValue> {
    if targets.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::contract("centerness targets must lie in [0, 1]"));
    }
    let value = g.bce_with_logits(pred, targets)?;
    Ok(LossValue::new(value, targets.len() as f64))
}

/// `sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b))`.
pub fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> f64 {
    let lr = l.min(r) / l.max(r);
    let tb = t.min(b) / t.max(b);
    let v = (lr * tb).sqrt();
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}
