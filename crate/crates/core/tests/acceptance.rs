//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! A1-A3, A7 and A8 are properties of the code and fail the target. A4-A6
//! are empirical outcomes of the default study and are reported only.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use orthomap::detector::{load_model, HeadKind};
use orthomap::experiment::{run_ab_study, run_evaluation, run_training, AbSummary, ExperimentConfig, StudyRun};
use orthomap::ortho::{build_orthogonal_basis, build_orthogonal_basis_with, gaussian_kernel};
use orthomap::tensor::Array;

#[path = "support/grad.rs"]
mod grad;
#[path = "support/oracles.rs"]
mod oracles;

const STUDY_EPOCHS: usize = 12;
const STUDY_DECAY: [usize; 2] = [8, 11];

struct Line {
    id: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: &'static str, gating: bool, pass: bool, detail: String) {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    lines.push(Line {
        id,
        pass,
        gating,
        detail,
    });
}

/// Runs every check, returning the names of those that panicked.
fn run_checks(checks: &[(&str, fn())]) -> Vec<String> {
    checks
        .iter()
        .filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err())
        .map(|(name, _)| name.to_string())
        .collect()
}

fn a1() -> (bool, String) {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut bases = 0;
    for c in [3, 9, 32] {
        for n in [8, 64, 256] {
            if c > n {
                continue;
            }
            for seed in 0..20 {
                let b = build_orthogonal_basis(seed, c, n, 3).expect("basis");
                worst = worst.max(b.orthonormality_error());
                bases += 1;
            }
        }
    }
    let mut seen = Vec::new();
    let redrawn = build_orthogonal_basis_with(40, 9, 64, 3, |s| {
        seen.push(s);
        let k = gaussian_kernel(s, 9, 64, 3);
        if seen.len() == 1 {
            let mut d = k.data().to_vec();
            let per = 9 * 64;
            d.copy_within(per..2 * per, 4 * per);
            Array::new(vec![9, 3, 3, 64], d).expect("same shape")
        } else {
            k
        }
    });
    let redraw_ok = seen.len() == 2 && redrawn.is_ok_and(|b| b.orthonormality_error() < 1e-9);
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && redraw_ok && secs < 5.0;
    (
        pass,
        format!("{bases} bases, max |KK^T - I| {worst:.2e}, redraw path {redraw_ok}, {secs:.2}s"),
    )
}

fn timed_suite(checks: &[(&str, fn())], limit: f64) -> (bool, String) {
    let t = Instant::now();
    let failed = run_checks(checks);
    let secs = t.elapsed().as_secs_f64();
    let detail = if failed.is_empty() {
        format!("{} groups agree, {secs:.1}s", checks.len())
    } else {
        format!("failed: {}, {secs:.1}s", failed.join(", "))
    };
    (failed.is_empty() && secs < limit, detail)
}

fn study_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.detector.optim.epochs = STUDY_EPOCHS;
    cfg.detector.optim.decay_epochs = STUDY_DECAY.to_vec();
    cfg
}

#[derive(Default)]
struct RunChecks {
    basis_frozen: Vec<(u64, bool)>,
    om_scale_change: f64,
    linear_scale_change: f64,
}

fn max_change(run: &StudyRun, alpha: f64) -> f64 {
    let rows = &run.evaluation.positive_features;
    let n = run.model.config().feature_dim;
    let mut data = Vec::with_capacity(rows.len() * n);
    for r in rows {
        data.extend_from_slice(&r.features);
    }
    let x = Array::new(vec![rows.len(), n], data).expect("feature rows");
    let base = run.model.classify_features(&x).expect("scores");
    let scaled = run.model.classify_features(&x.scale(alpha)).expect("scores");
    base.max_abs_diff(&scaled)
}

fn same_bits(a: &Array, b: &Array) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn inspect(run: &StudyRun, dir: &Path, checks: &mut RunChecks) {
    match run.head {
        HeadKind::Om => {
            let c = run.model.config();
            let fresh = build_orthogonal_basis(c.seed, run.model.classes(), c.feature_dim, c.basis_ksize).expect("basis");
            let held = run.model.basis().expect("om basis");
            let dir = dir.join(format!("om_seed{}", run.seed));
            let stored = load_model(&dir.join("model.bin")).expect("saved model");
            let ok = same_bits(held.basis(), fresh.basis()) && same_bits(stored.basis().expect("om basis").basis(), fresh.basis());
            checks.basis_frozen.push((run.seed, ok));
            for alpha in [0.1, 10.0] {
                checks.om_scale_change = checks.om_scale_change.max(max_change(run, alpha));
            }
        }
        _ => {
            let smallest = [0.1, 10.0].map(|a| max_change(run, a)).into_iter().fold(f64::INFINITY, f64::min);
            checks.linear_scale_change = if checks.linear_scale_change == 0.0 {
                smallest
            } else {
                checks.linear_scale_change.min(smallest)
            };
        }
    }
}

fn study_lines(lines: &mut Vec<Line>, s: &AbSummary) {
    let r = &s.records;
    let n = r.len();
    let wins = r.iter().filter(|x| x.map_om >= x.map_linear).count();
    report(
        lines,
        "A4",
        false,
        s.means.map_om >= s.means.map_linear && wins >= 3,
        format!(
            "mean mAP om {:.4} linear {:.4}, om wins or ties {wins}/{n}",
            s.means.map_om, s.means.map_linear
        ),
    );
    let fewer = r.iter().filter(|x| x.family_confusion_om < x.family_confusion_linear).count();
    report(
        lines,
        "A5",
        false,
        fewer >= 4,
        format!(
            "within-family confusion om {:.4} linear {:.4}, om lower {fewer}/{n}",
            s.means.family_confusion_om, s.means.family_confusion_linear
        ),
    );
    let cos = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let lower = r.iter().filter(|x| cos(x.inter_cos_om) < cos(x.inter_cos_linear)).count();
    let worst_om = r.iter().map(|x| cos(x.inter_cos_om)).fold(f64::NEG_INFINITY, f64::max);
    report(
        lines,
        "A6",
        false,
        lower == n && worst_om < 0.2,
        format!(
            "inter-class |cos| om {:.3} linear {:.3}, om lower {lower}/{n}, om max {worst_om:.3}",
            cos(s.means.inter_cos_om),
            cos(s.means.inter_cos_linear)
        ),
    );
}

fn rerun_matches(cfg: &ExperimentConfig, first: &Path, again: &Path) -> bool {
    let run_cfg = cfg.with_head(HeadKind::Om, cfg.study.seeds[0]);
    let train = run_cfg.data.train_set().expect("train set");
    let test = run_cfg.data.test_set().expect("test set");
    let (model, _) = run_training(&run_cfg, &train, Some(again), |_| {}).expect("training");
    run_evaluation(&run_cfg, &model, &test, Some(again)).expect("evaluation");
    let read = |d: &Path| fs::read(d.join("metrics.json")).expect("metrics.json");
    read(first) == read(again)
}

fn main() {
    let mut lines = Vec::new();

    let (pass, detail) = a1();
    report(&mut lines, "A1", true, pass, detail);
    let (pass, detail) = timed_suite(grad::ALL, 60.0);
    report(&mut lines, "A2", true, pass, detail);
    let (pass, detail) = timed_suite(oracles::ALL, 60.0);
    report(&mut lines, "A3", true, pass, detail);

    let cfg = study_config();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    let study_dir = root.join("study");
    let t = Instant::now();
    let mut checks = RunChecks::default();
    let summary = run_ab_study(&cfg, Some(&study_dir), |run| {
        eprintln!(
            "  seed {} {:<6} mAP {:.4} ({:.0}s)",
            run.seed,
            run.head.name(),
            run.evaluation.report.map,
            t.elapsed().as_secs_f64()
        );
        inspect(run, &study_dir, &mut checks);
    })
    .expect("study");
    eprintln!("  study finished in {:.0}s", t.elapsed().as_secs_f64());
    study_lines(&mut lines, &summary);

    let frozen = checks.basis_frozen.iter().all(|(_, ok)| *ok);
    let first = study_dir.join(format!("om_seed{}", cfg.study.seeds[0]));
    let repeat = rerun_matches(&cfg, &first, &root.join("repeat"));
    report(
        &mut lines,
        "A7",
        true,
        frozen && repeat,
        format!(
            "basis bit-identical in {}/{} om runs, repeated run metrics.json identical {repeat}",
            checks.basis_frozen.iter().filter(|(_, ok)| *ok).count(),
            checks.basis_frozen.len()
        ),
    );
    report(
        &mut lines,
        "A8",
        true,
        checks.om_scale_change < 1e-10 && checks.linear_scale_change > 1e-3,
        format!(
            "alpha in {{0.1, 10}}: om max change {:.2e}, linear min change {:.2e}",
            checks.om_scale_change, checks.linear_scale_change
        ),
    );

    let failed: Vec<_> = lines.iter().filter(|l| l.gating && !l.pass).map(|l| l.id).collect();
    let reported: Vec<_> = lines.iter().filter(|l| !l.gating && !l.pass).map(|l| format!("{} ({})", l.id, l.detail)).collect();
    if !reported.is_empty() {
        println!("empirical criteria not met: {}", reported.join("; "));
    }
    if !failed.is_empty() {
        println!("failing criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
