use orthomap::losses;
use orthomap::ortho::{build_orthogonal_basis, om_score_rows};
use orthomap::seeds;
use orthomap::tensor::{finite_diff_check, Array, Graph, Var};
use orthomap::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

fn rng(label: &str, seed: u64) -> ChaCha8Rng {
    seeds::rng(seeds::mix_label(seed, label))
}

/// Uniform values kept at least 0.1 away from zero so kinks stay out of
/// reach of the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Reduces any node to a scalar with fixed random weights.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng("weights", seed);
    let w = uniform(&mut r, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn check<F>(name: &str, tol: f64, make: impl Fn(&mut ChaCha8Rng) -> Array, f: F)
where
    F: Fn(&mut Graph, Var, u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut r = rng(name, seed);
        let x = make(&mut r);
        let err = finite_diff_check(|g, v| f(g, v, seed), &x, STEP).unwrap();
        assert!(err < tol, "{name} seed {seed}: relative error {err:e}");
    }
}

fn elementwise(name: &str, op: impl Fn(&mut Graph, Var) -> Result<Var>) {
    check(
        name,
        TOL,
        |r| away_from_zero(r, &[3, 4]),
        |g, x, s| {
            let y = op(g, x)?;
            weighted_sum(g, y, s)
        },
    );
}

pub fn unary_ops() {
    elementwise("relu", |g, x| g.relu(x));
    elementwise("sigmoid", |g, x| g.sigmoid(x));
    elementwise("exp", |g, x| g.exp(x));
    elementwise("abs", |g, x| g.abs(x));
    elementwise("scale", |g, x| g.scale(x, -1.7));
    elementwise("add_scalar", |g, x| g.add_scalar(x, 0.3));
    elementwise("clamp", |g, x| g.clamp(x, -0.5, 0.05));
    elementwise("reshape", |g, x| g.reshape(x, &[2, 6]));
    elementwise("flatten", |g, x| g.flatten(x));
    elementwise("transpose", |g, x| g.transpose(x));
    check(
        "log",
        TOL,
        |r| uniform(r, &[3, 4], 0.2, 2.0),
        |g, x, s| {
            let y = g.log(x)?;
            weighted_sum(g, y, s)
        },
    );
}

pub fn binary_ops() {
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        check(
            name,
            TOL,
            |r| away_from_zero(r, &[3, 4]),
            move |g, x, s| {
                let mut r = rng("other", s);
                let other = g.param(away_from_zero(&mut r, &[3, 4]));
                // x on both sides so each argument slot is exercised
                let y = match which {
                    0 => g.add(x, other)?,
                    1 => g.sub(other, x)?,
                    _ => g.mul(x, other)?,
                };
                let z = g.mul(y, x)?;
                weighted_sum(g, z, s)
            },
        );
    }
}

pub fn reductions_and_broadcast() {
    check(
        "sum",
        TOL,
        |r| away_from_zero(r, &[2, 5]),
        |g, x, _| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
    );
    check(
        "mean",
        TOL,
        |r| away_from_zero(r, &[2, 5]),
        |g, x, _| {
            let e = g.exp(x)?;
            g.mean(e)
        },
    );
    check(
        "broadcast",
        TOL,
        |r| away_from_zero(r, &[]),
        |g, x, s| {
            let b = g.broadcast(x, &[3, 2])?;
            let e = g.exp(b)?;
            weighted_sum(g, e, s)
        },
    );
}

pub fn matmul_both_sides() {
    check(
        "matmul_left",
        TOL,
        |r| away_from_zero(r, &[3, 4]),
        |g, x, s| {
            let mut r = rng("rhs", s);
            let b = g.constant(away_from_zero(&mut r, &[4, 2]));
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, s)
        },
    );
    check(
        "matmul_right",
        TOL,
        |r| away_from_zero(r, &[4, 2]),
        |g, x, s| {
            let mut r = rng("lhs", s);
            let a = g.constant(away_from_zero(&mut r, &[3, 4]));
            let y = g.matmul(a, x)?;
            weighted_sum(g, y, s)
        },
    );
}

fn conv_case(batched: bool, stride: usize, padding: usize, wrt_kernel: bool) {
    let name = format!("conv b{batched} s{stride} p{padding} k{wrt_kernel}");
    let in_shape: Vec<usize> = if batched { vec![2, 2, 5, 6] } else { vec![2, 5, 6] };
    let k_shape = vec![3, 3, 3, 2];
    let x_shape = if wrt_kernel { k_shape.clone() } else { in_shape.clone() };
    check(
        &name,
        TOL,
        |r| away_from_zero(r, &x_shape),
        |g, x, s| {
            let mut r = rng("conv-other", s);
            let (input, kernel) = if wrt_kernel {
                (g.constant(away_from_zero(&mut r, &in_shape)), x)
            } else {
                (x, g.constant(away_from_zero(&mut r, &k_shape)))
            };
            let y = g.conv2d(input, kernel, stride, padding)?;
            weighted_sum(g, y, s)
        },
    );
}

pub fn conv2d_input_and_kernel() {
    for batched in [false, true] {
        for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            conv_case(batched, stride, padding, false);
            conv_case(batched, stride, padding, true);
        }
    }
}

pub fn bias_and_layout_ops() {
    for shape in [vec![3, 2, 2], vec![2, 3, 2, 2]] {
        let s2 = shape.clone();
        check(
            "add_channel_bias",
            TOL,
            |r| away_from_zero(r, &[3]),
            move |g, b, s| {
                let mut r = rng("cb", s);
                let x = g.constant(away_from_zero(&mut r, &s2));
                let y = g.add_channel_bias(x, b)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, s)
            },
        );
        let s3 = shape.clone();
        check(
            "channels_last",
            TOL,
            |r| away_from_zero(r, &s3),
            |g, x, s| {
                let y = g.channels_last(x)?;
                let y = g.exp(y)?;
                weighted_sum(g, y, s)
            },
        );
    }
    check(
        "add_row_bias",
        TOL,
        |r| away_from_zero(r, &[4]),
        |g, b, s| {
            let mut r = rng("rb", s);
            let x = g.constant(away_from_zero(&mut r, &[3, 4]));
            let y = g.add_row_bias(x, b)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        },
    );
    check(
        "global_avg_pool",
        TOL,
        |r| away_from_zero(r, &[2, 3, 3]),
        |g, x, s| {
            let y = g.global_avg_pool(x)?;
            let y = g.exp(y)?;
            weighted_sum(g, y, s)
        },
    );
    check(
        "select_rows",
        TOL,
        |r| away_from_zero(r, &[4, 3]),
        |g, x, s| {
            let y = g.select_rows(x, &[2, 0, 2])?;
            let y = g.exp(y)?;
            weighted_sum(g, y, s)
        },
    );
    check(
        "concat_rows",
        TOL,
        |r| away_from_zero(r, &[2, 3]),
        |g, x, s| {
            let e = g.exp(x)?;
            let y = g.concat_rows(&[x, e, x])?;
            weighted_sum(g, y, s)
        },
    );
}

pub fn group_norm_all_inputs() {
    for shape in [vec![4, 3, 3], vec![2, 4, 2, 3]] {
        for (slot, groups) in [(0, 2), (1, 2), (2, 4), (0, 1)] {
            let xs = shape.clone();
            let make = move |r: &mut ChaCha8Rng| {
                if slot == 0 {
                    away_from_zero(r, &xs)
                } else {
                    away_from_zero(r, &[4])
                }
            };
            let s2 = shape.clone();
            check(
                "group_norm",
                TOL,
                make,
                move |g, v, s| {
                    let mut r = rng("gn", s);
                    let x = if slot == 0 { v } else { g.constant(away_from_zero(&mut r, &s2)) };
                    let gamma = if slot == 1 { v } else { g.constant(away_from_zero(&mut r, &[4])) };
                    let beta = if slot == 2 { v } else { g.constant(away_from_zero(&mut r, &[4])) };
                    let y = g.group_norm(x, gamma, beta, groups, 1e-5)?;
                    let y = g.sigmoid(y)?;
                    weighted_sum(g, y, s)
                },
            );
        }
    }
}

pub fn max_pool_without_ties() {
    check(
        "max_pool2",
        TOL,
        |r| {
            // distinct values so the argmax is stable under the step
            let n = 2 * 4 * 4;
            let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            for i in (1..n).rev() {
                v.swap(i, r.gen_range(0..=i));
            }
            Array::new(vec![2, 4, 4], v).unwrap()
        },
        |g, x, s| {
            let y = g.max_pool2(x)?;
            weighted_sum(g, y, s)
        },
    );
}

pub fn l2_normalize_rows() {
    check(
        "l2_normalize",
        TOL,
        |r| away_from_zero(r, &[4, 5]),
        |g, x, s| {
            let y = g.l2_normalize(x, 1e-12)?;
            weighted_sum(g, y, s)
        },
    );
}

pub fn fused_losses() {
    check(
        "sigmoid_focal",
        TOL,
        |r| away_from_zero(r, &[6, 3]),
        |g, x, s| {
            let mut r = rng("focal-t", s);
            let cls: Vec<usize> = (0..6).map(|_| r.gen_range(0..3)).collect();
            // even rows positive, odd rows background
            let t = Array::from_fn(vec![6, 3], |i| {
                if i / 3 % 2 == 0 && i % 3 == cls[i / 3] {
                    1.0
                } else {
                    0.0
                }
            });
            Ok(losses::sigmoid_focal_loss(g, x, &t, 0.25, 2.0)?.value)
        },
    );
    check(
        "softmax_ce",
        TOL,
        |r| away_from_zero(r, &[5, 4]),
        |g, x, s| {
            let mut r = rng("ce-t", s);
            let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
            Ok(losses::softmax_cross_entropy(g, x, &labels)?.value)
        },
    );
    check(
        "centerness_bce",
        TOL,
        |r| away_from_zero(r, &[6, 1]),
        |g, x, s| {
            let mut r = rng("bce-t", s);
            let t = uniform(&mut r, &[6, 1], 0.0, 1.0);
            Ok(losses::centerness_loss(g, x, &t)?.value)
        },
    );
    check(
        "opl",
        TOL,
        |r| away_from_zero(r, &[6, 4]),
        |g, x, _| Ok(losses::opl_loss(g, x, &[0, 1, 0, 2, 1, 0])?.value),
    );
}

pub fn giou_on_overlapping_and_disjoint_boxes() {
    check(
        "giou",
        1e-5,
        |r| {
            Array::from_fn(vec![4, 4], |i| {
                let base = [2.0, 3.0, 12.0, 11.0][i % 4];
                base + r.gen_range(-1.5..1.5) + if i / 4 == 3 { 20.0 } else { 0.0 }
            })
        },
        |g, x, s| {
            let mut r = rng("giou-gt", s);
            let gt = Array::from_fn(vec![4, 4], |i| [1.0, 2.0, 10.0, 12.0][i % 4] + r.gen_range(-0.5..0.5));
            Ok(losses::giou_loss(g, x, &gt)?.value)
        },
    );
}

pub fn conv_normalize_cosine_focal_chain() {
    check(
        "composite",
        TOL,
        |r| away_from_zero(r, &[4, 3, 3, 2]),
        |g, kernel, s| {
            let mut r = rng("composite-in", s);
            let input = g.constant(away_from_zero(&mut r, &[2, 4, 4]));
            let basis = build_orthogonal_basis(s, 3, 4, 3)?;
            let feat = g.conv2d(input, kernel, 1, 1)?;
            let rows = g.channels_last(feat)?;
            let cos = om_score_rows(g, rows, &basis)?;
            let logits = g.scale(cos, 4.0)?;
            let t = Array::from_fn(vec![16, 3], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
            Ok(losses::sigmoid_focal_loss(g, logits, &t, 0.25, 2.0)?.value)
        },
    );
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("unary ops", unary_ops),
    ("binary ops", binary_ops),
    ("reductions and broadcast", reductions_and_broadcast),
    ("matmul", matmul_both_sides),
    ("conv2d", conv2d_input_and_kernel),
    ("bias and layout", bias_and_layout_ops),
    ("group norm", group_norm_all_inputs),
    ("max pool", max_pool_without_ties),
    ("l2 normalize", l2_normalize_rows),
    ("fused losses", fused_losses),
    ("giou", giou_on_overlapping_and_disjoint_boxes),
    ("conv-normalize-cosine-focal chain", conv_normalize_cosine_focal_chain),
];
