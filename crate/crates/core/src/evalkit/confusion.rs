use serde::Serialize;

use super::matching::{ImageMatches, Outcome};

/// `[C + 1, C + 1]` detection confusion counts. Rows are ground-truth
/// classes, columns predicted classes; index `C` is background (column:
/// missed ground truth, row: unmatched detections).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_matches(images: &[ImageMatches], classes: usize) -> Self {
        let mut counts = vec![vec![0u64; classes + 1]; classes + 1];
        for im in images {
            for (k, &gt_class) in im.gt_classes.iter().enumerate() {
                let col = match im.gt_claimed_by[k] {
                    Some(d) => im.detections[d].class_id,
                    None => classes,
                };
                counts[gt_class][col] += 1;
            }
            for d in &im.detections {
                if d.outcome == Outcome::Background {
                    counts[classes][d.class_id] += 1;
                }
            }
        }
        ConfusionMatrix { classes, counts }
    }

    /// Each row as percentages of its total (all zero for an empty row).
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| if total == 0 { 0.0 } else { 100.0 * v as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Detections that claimed a box (the `C x C` block).
    pub fn matched(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][..self.classes].iter().sum::<u64>()).sum()
    }

    /// Share of matched detections whose class is a wrong member of the
    /// ground truth's family. `family_of` maps a class to its family.
    pub fn family_confusion(&self, family_of: impl Fn(usize) -> usize) -> f64 {
        let matched = self.matched();
        if matched == 0 {
            return 0.0;
        }
        let mut within = 0u64;
        for i in 0..self.classes {
            for j in 0..self.classes {
                if i != j && family_of(i) == family_of(j) {
                    within += self.counts[i][j];
                }
            }
        }
        within as f64 / matched as f64
    }

    pub fn to_csv(&self) -> String {
        let label = |i: usize| {
            if i == self.classes {
                "background".to_string()
            } else {
                i.to_string()
            }
        };
        let mut out = String::from("gt\\pred");
        for j in 0..=self.classes {
            out.push(',');
            out.push_str(&label(j));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&label(i));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}
