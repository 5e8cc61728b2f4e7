//! Reference implementations and the randomized comparisons against them.
#![allow(dead_code)]

use orthomap::detector::{detection_order, iou, nms, Detection};
use orthomap::evalkit::{ap_from_ranked, match_detections, Outcome};
use orthomap::ortho::{build_orthogonal_basis, om_score};
use orthomap::seeds;
use orthomap::synthgen::Annotation;
use orthomap::tensor::{Array, Graph};
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(seed: u64, shape: Vec<usize>) -> Array {
    let mut r = seeds::rng(seed);
    Array::from_fn(shape, |_| r.sample(StandardNormal))
}

fn conv(x: &Array, k: &Array, stride: usize, pad: usize) -> Array {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    g.value(y).clone()
}

fn det(bbox: [f64; 4], class_id: usize, score: f64) -> Detection {
    Detection {
        bbox,
        class_id,
        score,
        location: 0,
    }
}

fn ann(bbox: [f64; 4], class_id: usize) -> Annotation {
    Annotation {
        bbox,
        class_id,
        family_id: class_id / 3,
    }
}

fn shifted(b: [f64; 4], dx: f64) -> [f64; 4] {
    [b[0] + dx, b[1], b[2] + dx, b[3]]
}

/// Quadruple loop over output pixels, kernel taps and channels.
pub fn naive_conv(x: &Array, k: &Array, stride: usize, pad: usize) -> Array {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ks) = (k.shape()[0], k.shape()[1]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = Array::zeros(vec![cout, ho, wo]);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for u in 0..ks {
                    for v in 0..ks {
                        let y = (i * stride + u) as isize - pad as isize;
                        let xx = (j * stride + v) as isize - pad as isize;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            let xv = x.data()[(c * h + y as usize) * w + xx as usize];
                            acc += k.data()[((o * ks + u) * ks + v) * cin + c] * xv;
                        }
                    }
                }
                out.data_mut()[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

pub fn conv_matches_naive_loops() {
    for seed in 0..10u64 {
        for (stride, pad, ks) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)] {
            let x = gaussian(seeds::mix(seed, 1), vec![3, 9, 8]);
            let k = gaussian(seeds::mix(seed, 2), vec![4, ks, ks, 3]);
            let got = conv(&x, &k, stride, pad);
            let want = naive_conv(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "seed {seed} stride {stride} pad {pad}");
        }
    }
}

pub fn om_score_matches_per_location_loop() {
    for seed in 0..5u64 {
        let basis = build_orthogonal_basis(seed, 3, 8, 3).unwrap();
        let feat = gaussian(seeds::mix(seed, 9), vec![8, 4, 4]);
        let mut g = Graph::new();
        let x = g.constant(feat.clone());
        let map = om_score(&mut g, x, &basis).unwrap();
        let got = g.value(map.scores);
        assert_eq!(got.shape(), &[4, 4, 3]);
        for loc in 0..16 {
            let xj: Vec<f64> = (0..8).map(|c| feat.data()[c * 16 + loc]).collect();
            let xn = xj.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..3 {
                let p = basis.prototype(k);
                let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = p.iter().zip(&xj).map(|(a, b)| a * b).sum();
                let want = dot / (pn * xn);
                let v = got.data()[loc * 3 + k];
                assert!((v - want).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}

/// Repeatedly take the best remaining box and drop same-class overlaps.
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut left = dets.to_vec();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if detection_order(&left[i], &left[best]).is_lt() {
                best = i;
            }
        }
        let b = left.remove(best);
        left.retain(|d| d.class_id != b.class_id || iou(&d.bbox, &b.bbox) <= thr);
        kept.push(b);
    }
    kept
}

pub fn nms_matches_quadratic_reference() {
    for seed in 0..25u64 {
        let mut r = seeds::rng(seeds::mix(88, seed));
        let dets: Vec<Detection> = (0..20)
            .map(|_| {
                let (x, y) = (r.gen_range(0.0..30.0), r.gen_range(0.0..30.0));
                let (w, h) = (r.gen_range(3.0..15.0), r.gen_range(3.0..15.0));
                // coarse scores so ties occur
                let score = (r.gen_range(0..6) as f64) / 6.0 + 0.1;
                det([x, y, x + w, y + h], r.gen_range(0..3), score)
            })
            .collect();
        assert_eq!(nms(dets.clone(), 0.5), reference_nms(&dets, 0.5), "seed {seed}");
    }
}

/// Textbook all-points AP: for each distinct recall level, the best
/// precision at that recall or beyond, times the recall increment.
pub fn naive_ap(scored: &[(f64, bool)], gt: usize) -> f64 {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    for k in 1..=s.len() {
        let tp = s[..k].iter().filter(|x| x.1).count() as f64;
        points.push((tp / gt as f64, tp / k as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.dedup();
    for r in levels {
        let p = points
            .iter()
            .filter(|q| q.0 >= r)
            .map(|q| q.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

pub fn ap_matches_naive_oracle() {
    for seed in 0..30u64 {
        let mut rng = seeds::rng(seeds::mix(77, seed));
        let gt = rng.gen_range(1..8);
        let n = rng.gen_range(0..15);
        let mut tps = 0;
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let hit = tps < gt && rng.gen_bool(0.5);
                tps += usize::from(hit);
                (rng.gen::<f64>(), hit)
            })
            .collect();
        let a = ap_from_ranked(&scored, gt);
        let b = naive_ap(&scored, gt);
        assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        assert!((0.0..=1.0).contains(&a));
    }
}

/// Direct restatement of cross-class greedy matching.
pub fn naive_matching(dets: &[Detection], gts: &[Annotation], thr: f64) -> Vec<(Option<usize>, bool)> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
    });
    let mut taken = vec![false; gts.len()];
    let mut res = Vec::new();
    for i in idx {
        let d = &dets[i];
        let mut pick = None;
        for same in [true, false] {
            let mut best = thr;
            for (k, g) in gts.iter().enumerate() {
                let o = iou(&d.bbox, &g.bbox);
                if !taken[k] && (g.class_id == d.class_id) == same && o >= best {
                    if pick.is_none() || o > best {
                        pick = Some(k);
                    }
                    best = o;
                }
            }
            if pick.is_some() {
                break;
            }
        }
        if let Some(k) = pick {
            taken[k] = true;
        }
        res.push((pick, pick.is_some_and(|k| gts[k].class_id == d.class_id)));
    }
    res
}

pub fn matching_agrees_with_naive_oracle() {
    for seed in 0..40u64 {
        let mut rng = seeds::rng(seeds::mix(5, seed));
        let boxes = |rng: &mut rand_chacha::ChaCha8Rng| {
            let x = rng.gen_range(0.0..20.0);
            let y = rng.gen_range(0.0..20.0);
            [x, y, x + rng.gen_range(4.0..10.0), y + rng.gen_range(4.0..10.0)]
        };
        let gts: Vec<_> = (0..rng.gen_range(0..5)).map(|_| ann(boxes(&mut rng), rng.gen_range(0..3))).collect();
        let dets: Vec<_> = (0..rng.gen_range(0..7))
            .map(|_| {
                let b = if !gts.is_empty() && rng.gen_bool(0.6) {
                    shifted(gts[rng.gen_range(0..gts.len())].bbox, rng.gen_range(-2.0..2.0))
                } else {
                    boxes(&mut rng)
                };
                det(b, rng.gen_range(0..3), rng.gen::<f64>())
            })
            .collect();
        let m = match_detections(&dets, &gts, 0.5);
        let want = naive_matching(&dets, &gts, 0.5);
        let got: Vec<_> = m
            .detections
            .iter()
            .map(|d| (d.gt, d.outcome == Outcome::Correct))
            .collect();
        assert_eq!(got, want, "seed {seed}");
    }
}


pub const ALL: &[(&str, fn())] = &[
    ("conv2d vs naive loops", conv_matches_naive_loops),
    ("om score vs per-location loop", om_score_matches_per_location_loop),
    ("nms vs quadratic reference", nms_matches_quadratic_reference),
    ("matching vs naive greedy", matching_agrees_with_naive_oracle),
    ("ap vs textbook all-points", ap_matches_naive_oracle),
];
