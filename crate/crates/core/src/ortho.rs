//! Frozen orthonormal class prototypes and the two classification heads.
//!
//! The orthogonal-mapping head replaces a learned `C x N` classifier with a
//! fixed matrix whose rows are mutually orthogonal unit vectors, one per
//! class, and scores a feature vector by its cosine similarity to each row.
//! The matrix is produced once from a seeded random convolution kernel:
//!
//! 1. draw `K ~ N(0, 1)` with shape `[C, k, k, N]`;
//! 2. average over the `k x k` spatial window, leaving `[C, N]`;
//! 3. orthonormalise the rows with Gram-Schmidt.
//!
//! The result never changes afterwards and never enters an optimiser.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, Var, NORM_EPS};

/// Residual-norm tolerance below which a row counts as linearly dependent.
pub const GS_TOL: f64 = 1e-8;

/// How many fresh draws [`build_orthogonal_basis`] tries before giving up.
pub const MAX_DRAWS: u64 = 8;

/// Classical Gram-Schmidt with one re-orthogonalisation pass.
///
/// Row `i` of the output is a unit vector in the span of input rows
/// `0..=i`, orthogonal to every earlier output row. A row whose residual
/// after projection falls below `tol` (relative to its own norm) is treated
/// as linearly dependent and reported as [`Error::Degenerate`].
///
/// ```
/// use orthomap::ortho::gram_schmidt;
/// use orthomap::tensor::Array;
///
/// let rows = Array::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
/// let q = gram_schmidt(&rows, 1e-8).unwrap();
/// assert_eq!(q.data(), &[1.0, 0.0, 0.0, 1.0]);
/// ```
pub fn gram_schmidt(rows: &Array, tol: f64) -> Result<Array> {
    if rows.ndim() != 2 {
        return Err(Error::contract("gram_schmidt expects a 2-D array"));
    }
    if tol <= 0.0 {
        return Err(Error::contract("gram_schmidt: tol must be positive"));
    }
    let (c, n) = (rows.shape()[0], rows.shape()[1]);
    if c > n {
        return Err(Error::contract(format!(
            "cannot orthogonalise {c} rows in dimension {n}"
        )));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(c);
    for i in 0..c {
        let original = rows.row(i);
        let scale = norm(original);
        let mut v = original.to_vec();
        for _pass in 0..2 {
            // classical: every coefficient comes from the same v
            let coeffs: Vec<f64> = q.iter().map(|qj| dot(qj, &v)).collect();
            for (qj, cj) in q.iter().zip(coeffs) {
                v.iter_mut().zip(qj).for_each(|(a, b)| *a -= cj * b);
            }
        }
        let residual = norm(&v);
        if scale == 0.0 || residual < tol * scale {
            return Err(Error::Degenerate { row: i, residual });
        }
        v.iter_mut().for_each(|a| *a /= residual);
        q.push(v);
    }
    Array::new(vec![c, n], q.into_iter().flatten().collect())
}

/// An immutable orthonormal prototype matrix, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoBasis {
    basis: Array,
    seed: u64,
    draw_seed: u64,
    ksize: usize,
    pooled_from: Option<[usize; 4]>,
}

impl OrthoBasis {
    /// `[C, N]` matrix of prototypes.
    pub fn basis(&self) -> &Array {
        &self.basis
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.basis.row(class)
    }

    pub fn classes(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.basis.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the draw that was finally accepted (differs from
    /// [`OrthoBasis::seed`] only after a degenerate draw).
    pub fn draw_seed(&self) -> u64 {
        self.draw_seed
    }

    pub fn ksize(&self) -> usize {
        self.ksize
    }

    pub fn pooled_from(&self) -> Option<[usize; 4]> {
        self.pooled_from
    }

    /// Largest entry of `|B B^T - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.basis.matmul(&self.basis.transposed());
        let c = self.classes();
        let mut worst = 0.0f64;
        for i in 0..c {
            for j in 0..c {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.data()[i * c + j] - target).abs());
            }
        }
        worst
    }

    /// Re-creates a basis from stored rows, checking orthonormality.
    pub fn from_parts(basis: Array, seed: u64, ksize: usize) -> Result<Self> {
        if basis.ndim() != 2 || basis.shape()[0] > basis.shape()[1] {
            return Err(Error::contract("basis must be [C, N] with C <= N"));
        }
        let b = OrthoBasis {
            pooled_from: Some([basis.shape()[0], ksize, ksize, basis.shape()[1]]),
            basis,
            seed,
            draw_seed: seed,
            ksize,
        };
        let err = b.orthonormality_error();
        if err > 1e-9 {
            return Err(Error::contract(format!(
                "stored basis is not orthonormal (max error {err:e})"
            )));
        }
        Ok(b)
    }

    pub fn to_file(&self) -> BasisFile {
        BasisFile {
            seed: self.seed,
            classes: self.classes(),
            dim: self.dim(),
            ksize: self.ksize,
            rows: self.basis.rows().map(<[f64]>::to_vec).collect(),
        }
    }

    /// Writes `{seed, C, N, k, rows}` as JSON.
    pub fn export_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())
            .map_err(|e| Error::contract(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn import_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BasisFile = serde_json::from_str(&text).map_err(|e| {
            Error::format(path, crate::error::FormatErrorKind::Malformed, e.to_string())
        })?;
        let basis = Array::from_rows(&file.rows)?;
        if basis.shape() != [file.classes, file.dim] {
            return Err(Error::contract("basis rows disagree with C and N"));
        }
        OrthoBasis::from_parts(basis, file.seed, file.ksize)
    }
}

/// JSON form of a basis, for reproducibility audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisFile {
    pub seed: u64,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "N")]
    pub dim: usize,
    #[serde(rename = "k")]
    pub ksize: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Seeded standard-normal kernel of shape `[C, k, k, N]`.
pub fn gaussian_kernel(seed: u64, classes: usize, dim: usize, ksize: usize) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(vec![classes, ksize, ksize, dim], |_| {
        StandardNormal.sample(&mut rng)
    })
}

/// Averages a `[C, k, k, N]` kernel over its spatial window.
pub fn avg_pool_kernel(kernel: &Array) -> Result<Array> {
    let [c, kh, kw, n] = kernel.shape()[..] else {
        return Err(Error::contract("kernel must be [C, k, k, N]"));
    };
    let window = (kh * kw) as f64;
    let mut out = vec![0.0; c * n];
    for ci in 0..c {
        for s in 0..kh * kw {
            let src = &kernel.data()[(ci * kh * kw + s) * n..(ci * kh * kw + s + 1) * n];
            out[ci * n..(ci + 1) * n]
                .iter_mut()
                .zip(src)
                .for_each(|(o, v)| *o += v);
        }
    }
    out.iter_mut().for_each(|v| *v /= window);
    Array::new(vec![c, n], out)
}

/// Draws, pools and orthogonalises a prototype basis.
///
/// ```
/// use orthomap::ortho::build_orthogonal_basis;
///
/// let b = build_orthogonal_basis(7, 4, 16, 3).unwrap();
/// assert!(b.orthonormality_error() < 1e-9);
/// assert_eq!(b, build_orthogonal_basis(7, 4, 16, 3).unwrap());
/// ```
pub fn build_orthogonal_basis(seed: u64, classes: usize, dim: usize, ksize: usize) -> Result<OrthoBasis> {
    build_orthogonal_basis_with(seed, classes, dim, ksize, |s| {
        gaussian_kernel(s, classes, dim, ksize)
    })
}

/// Like [`build_orthogonal_basis`] but with a caller-supplied kernel source.
/// Attempt `a` asks `draw` for the kernel of seed `seed + a`.
pub fn build_orthogonal_basis_with<F>(
    seed: u64,
    classes: usize,
    dim: usize,
    ksize: usize,
    mut draw: F,
) -> Result<OrthoBasis>
where
    F: FnMut(u64) -> Array,
{
    if classes == 0 || classes > dim {
        return Err(Error::contract(format!(
            "orthogonal basis needs 1 <= C <= N, got C={classes}, N={dim}"
        )));
    }
    if ksize == 0 {
        return Err(Error::contract("kernel size must be at least 1"));
    }
    let mut last = None;
    for attempt in 0..MAX_DRAWS {
        let draw_seed = seed.wrapping_add(attempt);
        let kernel = draw(draw_seed);
        if kernel.shape() != [classes, ksize, ksize, dim] {
            return Err(Error::contract(format!(
                "kernel source returned shape {:?}",
                kernel.shape()
            )));
        }
        let pooled = avg_pool_kernel(&kernel)?;
        match gram_schmidt(&pooled, GS_TOL) {
            Ok(basis) => {
                return Ok(OrthoBasis {
                    basis,
                    seed,
                    draw_seed,
                    ksize,
                    pooled_from: Some([classes, ksize, ksize, dim]),
                })
            }
            Err(e @ Error::Degenerate { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Per-location cosine scores, shape `[H, W, C]`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMap {
    pub scores: Var,
}

/// Cosine similarity of each row of `[M, N]` features with each prototype,
/// giving `[M, C]`. Gradient flows to the features only.
pub fn om_score_rows(g: &mut Graph, rows: Var, basis: &OrthoBasis) -> Result<Var> {
    let shape = g.shape(rows).to_vec();
    if shape.len() != 2 || shape[1] != basis.dim() {
        return Err(Error::contract(format!(
            "features {shape:?} do not match basis dimension {}",
            basis.dim()
        )));
    }
    let unit = g.l2_normalize(rows, NORM_EPS)?;
    let protos = normalized_rows(basis.basis()).transposed();
    let protos = g.constant(protos);
    let cos = g.matmul(unit, protos)?;
    g.clamp(cos, -1.0, 1.0)
}

/// Cosine scoring of a `[N, H, W]` feature map against the basis.
///
/// ```
/// use orthomap::ortho::{build_orthogonal_basis, om_score};
/// use orthomap::tensor::{Array, Graph};
///
/// let basis = build_orthogonal_basis(1, 3, 8, 1).unwrap();
/// let mut g = Graph::new();
/// // every location holds prototype 2
/// let feat = Array::from_fn(vec![8, 2, 2], |i| basis.prototype(2)[i / 4]);
/// let x = g.constant(feat);
/// let map = om_score(&mut g, x, &basis).unwrap();
/// let s = g.value(map.scores);
/// assert_eq!(s.shape(), &[2, 2, 3]);
/// assert!((s.data()[2] - 1.0).abs() < 1e-12);
/// ```
pub fn om_score(g: &mut Graph, features: Var, basis: &OrthoBasis) -> Result<ScoreMap> {
    let (h, w) = spatial(g, features)?;
    let rows = g.channels_last(features)?;
    let scores = om_score_rows(g, rows, basis)?;
    let scores = g.reshape(scores, &[h, w, basis.classes()])?;
    Ok(ScoreMap { scores })
}

/// Learned affine classifier on `[M, N]` rows: `rows * W^T + b`.
pub fn linear_score_rows(g: &mut Graph, rows: Var, weights: Var, bias: Var) -> Result<Var> {
    let (rs, ws) = (g.shape(rows).to_vec(), g.shape(weights).to_vec());
    if rs.len() != 2 || ws.len() != 2 || rs[1] != ws[1] {
        return Err(Error::contract(format!(
            "linear head: features {rs:?} vs weights {ws:?}"
        )));
    }
    let wt = g.transpose(weights)?;
    let out = g.matmul(rows, wt)?;
    g.add_row_bias(out, bias)
}

/// Learned 1x1 classifier on a `[N, H, W]` map, giving `[H, W, C]`.
pub fn linear_score(g: &mut Graph, features: Var, weights: Var, bias: Var) -> Result<Var> {
    let (h, w) = spatial(g, features)?;
    let rows = g.channels_last(features)?;
    let out = linear_score_rows(g, rows, weights, bias)?;
    let c = g.shape(weights)[0];
    g.reshape(out, &[h, w, c])
}

fn spatial(g: &Graph, features: Var) -> Result<(usize, usize)> {
    match g.shape(features) {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::contract(format!("expected [N, H, W] features, got {s:?}"))),
    }
}

fn normalized_rows(a: &Array) -> Array {
    let mut out = a.clone();
    let n = a.shape()[1];
    for row in out.data_mut().chunks_mut(n) {
        let len = norm(row).max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= len);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rows_are_a_fixed_point() {
        let eye = Array::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(gram_schmidt(&eye, GS_TOL).unwrap(), eye);
    }

    #[test]
    fn dependent_rows_are_degenerate() {
        let rows = Array::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert!(matches!(
            gram_schmidt(&rows, GS_TOL),
            Err(Error::Degenerate { row: 1, .. })
        ));
    }

    #[test]
    fn more_classes_than_dimensions_is_rejected() {
        assert!(matches!(build_orthogonal_basis(0, 5, 4, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn unit_kernel_matches_raw_draw() {
        let raw = gaussian_kernel(11, 3, 6, 1).reshaped(vec![3, 6]).unwrap();
        let expected = gram_schmidt(&raw, GS_TOL).unwrap();
        let b = build_orthogonal_basis(11, 3, 6, 1).unwrap();
        assert_eq!(b.basis(), &expected);
    }

    #[test]
    fn redraws_after_a_degenerate_kernel() {
        let mut calls = Vec::new();
        let b = build_orthogonal_basis_with(5, 2, 4, 1, |s| {
            calls.push(s);
            if s == 5 {
                Array::from_fn(vec![2, 1, 1, 4], |i| (i % 4) as f64 + 1.0)
            } else {
                gaussian_kernel(s, 2, 4, 1)
            }
        })
        .unwrap();
        assert_eq!(calls, vec![5, 6]);
        assert_eq!(b.seed(), 5);
        assert_eq!(b.draw_seed(), 6);
    }

    #[test]
    fn gives_up_after_max_draws() {
        let r = build_orthogonal_basis_with(0, 2, 3, 1, |_| Array::zeros(vec![2, 1, 1, 3]));
        assert!(matches!(r, Err(Error::Degenerate { row: 0, .. })));
    }

    #[test]
    fn direct_cosine_value() {
        let basis = OrthoBasis::from_parts(
            Array::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
            0,
            1,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Array::from_rows(&[vec![3.0, 4.0, 0.0], vec![-2.0, 0.0, 0.0]]).unwrap());
        let s = om_score_rows(&mut g, x, &basis).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
        assert_eq!(v[2], -1.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.json");
        let b = build_orthogonal_basis(3, 4, 16, 3).unwrap();
        b.export_json(&path).unwrap();
        let back = OrthoBasis::import_json(&path).unwrap();
        assert_eq!(back.basis(), b.basis());
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["\"seed\"", "\"C\"", "\"N\"", "\"k\"", "\"rows\""] {
            assert!(text.contains(key), "missing {key}");
        }
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::new();
        let feat = Array::from_fn(vec![2, 2, 3], |i| i as f64);
        let x = g.constant(feat.clone());
        let w = g.param(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.param(Array::zeros(vec![2]));
        let out = linear_score(&mut g, x, w, b).unwrap();
        // [N, H, W] -> [H, W, C]
        for h in 0..2 {
            for wi in 0..3 {
                for c in 0..2 {
                    assert_eq!(
                        g.value(out).data()[(h * 3 + wi) * 2 + c],
                        feat.data()[(c * 2 + h) * 3 + wi]
                    );
                }
            }
        }
        let zw = g.param(Array::zeros(vec![2, 2]));
        let bias = g.param(Array::from_vec(vec![0.5, -1.5]));
        let out = linear_score(&mut g, x, zw, bias).unwrap();
        for px in g.value(out).data().chunks(2) {
            assert_eq!(px, &[0.5, -1.5]);
        }
    }
}
