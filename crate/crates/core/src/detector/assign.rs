//! Centre-sampling assignment of ground truth to dense grid locations.

use crate::losses::centerness_target;
use crate::synthgen::Annotation;
use crate::tensor::Array;

/// Shape of the output grid: `rows x cols` locations spaced `stride` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl Grid {
    pub fn for_image(size: usize, stride: usize) -> Self {
        Grid {
            rows: size / stride,
            cols: size / stride,
            stride,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel coordinates of location `index` (row-major).
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.cols, index % self.cols);
        let half = self.stride as f64 / 2.0;
        (
            (c * self.stride) as f64 + half,
            (r * self.stride) as f64 + half,
        )
    }
}

/// Per-location training targets, one row per grid location.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets {
    pub grid: Grid,
    pub classes: usize,
    /// `[locations, classes]`; one-hot on positives, zero on background.
    pub cls: Array,
    /// `(l, t, r, b)` offsets in strides; zero on background.
    pub offsets: Array,
    pub centerness: Vec<f64>,
    /// Index into the annotation list for positive locations.
    pub assigned: Vec<Option<usize>>,
}

impl DenseTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.assigned
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|_| i))
    }

    pub fn num_positives(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }

    pub fn label(&self, location: usize) -> Option<usize> {
        let row = self.cls.row(location);
        row.iter().position(|&v| v == 1.0)
    }
}

/// A location is positive for a box when it lies strictly inside the box and
/// within `center_radius * stride` of the box centre along both axes. When
/// several boxes qualify the smallest one wins (then the earliest).
pub fn assign_targets(
    annotations: &[Annotation],
    classes: usize,
    grid: Grid,
    center_radius: f64,
) -> DenseTargets {
    let n = grid.len();
    let mut cls = Array::zeros(vec![n, classes]);
    let mut offsets = Array::zeros(vec![n, 4]);
    let mut centerness = vec![0.0; n];
    let mut assigned = vec![None; n];
    let reach = center_radius * grid.stride as f64;
    let s = grid.stride as f64;
    for loc in 0..n {
        let (x, y) = grid.center(loc);
        let mut best: Option<(f64, usize)> = None;
        for (k, a) in annotations.iter().enumerate() {
            let [x1, y1, x2, y2] = a.bbox;
            let inside = x > x1 && x < x2 && y > y1 && y < y2;
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            let central = (x - cx).abs() < reach && (y - cy).abs() < reach;
            if inside && central && best.is_none_or(|(area, _)| a.area() < area) {
                best = Some((a.area(), k));
            }
        }
        if let Some((_, k)) = best {
            let a = &annotations[k];
            let [x1, y1, x2, y2] = a.bbox;
            let (l, t, r, b) = (x - x1, y - y1, x2 - x, y2 - y);
            cls.data_mut()[loc * classes + a.class_id] = 1.0;
            offsets.data_mut()[loc * 4..loc * 4 + 4].copy_from_slice(&[l / s, t / s, r / s, b / s]);
            centerness[loc] = centerness_target(l, t, r, b);
            assigned[loc] = Some(k);
        }
    }
    DenseTargets {
        grid,
        classes,
        cls,
        offsets,
        centerness,
        assigned,
    }
}
