use serde::Serialize;

use crate::tensor::NORM_EPS;

/// Summary of how class-mean features are arranged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrthoStats {
    /// Mean `|cos|` between the mean features of different classes.
    pub mean_inter_abs_cos: Option<f64>,
    /// Mean pairwise cosine within a class, averaged over classes with at
    /// least two samples.
    pub mean_intra_cos: Option<f64>,
    /// `cos` between class means; `None` where a class has no samples.
    pub pair_cos: Vec<Vec<Option<f64>>>,
    pub samples_per_class: Vec<usize>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(&unit(a), &unit(b)).clamp(-1.0, 1.0)
}

/// Statistics over labelled feature vectors. Each sample is L2-normalised
/// first, so rescaling any sample changes nothing.
pub fn orthogonality_metrics(samples: &[(usize, Vec<f64>)], classes: usize) -> OrthoStats {
    let dim = samples.first().map_or(0, |(_, v)| v.len());
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (c, v) in samples {
        let u = unit(v);
        sums[*c].iter_mut().zip(&u).for_each(|(s, x)| *s += x);
        counts[*c] += 1;
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let mut pair_cos = vec![vec![None; classes]; classes];
    for &i in &present {
        for &j in &present {
            pair_cos[i][j] = Some(cosine(&sums[i], &sums[j]));
        }
    }
    let mut inter = Vec::new();
    for (a, &i) in present.iter().enumerate() {
        for &j in &present[a + 1..] {
            inter.push(pair_cos[i][j].expect("present").abs());
        }
    }
    // mean pairwise cosine from the norm of the summed unit vectors
    let intra: Vec<f64> = present
        .iter()
        .filter(|&&c| counts[c] >= 2)
        .map(|&c| {
            let n = counts[c] as f64;
            ((dot(&sums[c], &sums[c]) - n) / (n * (n - 1.0))).clamp(-1.0, 1.0)
        })
        .collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    OrthoStats {
        mean_inter_abs_cos: mean(&inter),
        mean_intra_cos: mean(&intra),
        pair_cos,
        samples_per_class: counts,
    }
}
