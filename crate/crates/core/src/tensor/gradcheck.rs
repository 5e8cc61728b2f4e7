use super::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Compares the graph's analytic gradient of a scalar function against
/// central finite differences.
///
/// `f` receives a fresh graph and the input as a trainable leaf and must
/// return a scalar node. The result is the largest per-coordinate
/// `|analytic - numeric| / max(|analytic|, 1e-8)`.
///
/// ```
/// use orthomap::tensor::{finite_diff_check, Array};
///
/// let x = Array::from_vec(vec![1.0, 2.0]);
/// let err = finite_diff_check(
///     |g, x| {
///         let sq = g.mul(x, x)?;
///         g.sum(sq)
///     },
///     &x,
///     1e-5,
/// )
/// .unwrap();
/// assert!(err < 1e-8);
/// ```
pub fn finite_diff_check<F>(f: F, x: &Array, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite_diff_check: step must be positive"));
    }
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let loss = f(&mut g, input)?;
    g.backward(loss)?;
    let analytic = g
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Array::zeros(x.shape().to_vec()));

    let eval = |point: Array| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(point);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}
