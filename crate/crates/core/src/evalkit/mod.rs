//! Detection metrics and the two diagnostic analyses: confusion matrices and
//! feature-space orthogonality.

mod ap;
mod confusion;
mod features;
mod matching;

pub use ap::{ap_from_ranked, average_precision, ApResult};
pub use confusion::ConfusionMatrix;
pub use features::{orthogonality_metrics, OrthoStats};
pub use matching::{match_detections, DetMatch, ImageMatches, Outcome};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{assign_targets, Detector, InferConfig};
use crate::error::{Error, Result};
use crate::synthgen::{Dataset, GenConfig, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    /// IoU needed for a detection to claim a ground-truth box.
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let i = InferConfig::default();
        EvalConfig {
            score_threshold: i.score_threshold,
            nms_iou: i.nms_iou,
            pre_nms_top_k: i.pre_nms_top_k,
            max_detections: i.max_detections,
            match_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn infer(&self) -> InferConfig {
        InferConfig {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            pre_nms_top_k: self.pre_nms_top_k,
            max_detections: self.max_detections,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub head: String,
    pub model_seed: u64,
    pub data_seed: u64,
    pub classes: usize,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub confusion: Vec<Vec<u64>>,
    pub confusion_pct: Vec<Vec<f64>>,
    /// Share of matched detections naming a wrong subclass of the right
    /// family.
    pub family_confusion: f64,
    pub orthogonality: OrthoStats,
    pub detections: usize,
    pub true_positives: usize,
    pub warnings: Vec<String>,
    pub metadata: RunMetadata,
}

/// One positive (ground-truth assigned) grid location.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub scene_id: usize,
    pub class_id: usize,
    /// Whether a true-positive detection was decoded from this location.
    pub matched: bool,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub matches: Vec<ImageMatches>,
    pub confusion: ConfusionMatrix,
    pub positive_features: Vec<FeatureRow>,
}

/// Runs `model` over every scene and scores the result.
pub fn evaluate(model: &Detector, dataset: &Dataset, cfg: &EvalConfig, config_hash: &str) -> Result<Evaluation> {
    let classes = model.classes();
    if dataset.config.classes != classes {
        return Err(Error::contract(format!(
            "model has {classes} classes, dataset {}",
            dataset.config.classes
        )));
    }
    let infer = cfg.infer();
    let grid = model.grid();
    let mut matches = Vec::with_capacity(dataset.len());
    let mut tp_samples = Vec::new();
    let mut positive_features = Vec::new();
    let mut detections = 0;
    for scene in &dataset.scenes {
        let out = model.predict(&scene.image)?;
        let dets = crate::detector::decode_detections(
            &out,
            classes,
            model.config().head.is_softmax(),
            model.image_size(),
            &infer,
        );
        detections += dets.len();
        let m = match_detections(&dets, &scene.annotations, cfg.match_iou);
        let feature = |loc: usize| out.features.row(loc).to_vec();
        let mut tp_locations = Vec::new();
        for d in m.detections.iter().filter(|d| d.ap_true_positive) {
            tp_samples.push((d.class_id, feature(d.location)));
            tp_locations.push((d.location, d.class_id));
        }
        let targets = assign_targets(&scene.annotations, classes, grid, model.config().center_radius);
        for loc in targets.positives() {
            let class_id = targets.label(loc).expect("positive has a label");
            positive_features.push(FeatureRow {
                scene_id: scene.id,
                class_id,
                matched: tp_locations.contains(&(loc, class_id)),
                features: feature(loc),
            });
        }
        matches.push(m);
    }
    let ap = average_precision(&matches, classes);
    let confusion = ConfusionMatrix::from_matches(&matches, classes);
    let gen: &GenConfig = &dataset.config;
    let report = EvalReport {
        per_class_ap: ap.per_class,
        map: ap.map,
        confusion: confusion.counts.clone(),
        confusion_pct: confusion.row_percentages(),
        family_confusion: confusion.family_confusion(|c| gen.family_of(c)),
        orthogonality: orthogonality_metrics(&tp_samples, classes),
        detections,
        true_positives: tp_samples.len(),
        warnings: ap.warnings,
        metadata: RunMetadata {
            config_hash: config_hash.to_string(),
            head: model.config().head.name().to_string(),
            model_seed: model.config().seed,
            data_seed: dataset.seed,
            classes,
            scenes: dataset.len(),
        },
    };
    Ok(Evaluation {
        report,
        matches,
        confusion,
        positive_features,
    })
}

/// Detections for a single scene.
pub fn scene_matches(model: &Detector, scene: &Scene, cfg: &EvalConfig) -> Result<ImageMatches> {
    let dets = model.infer(&scene.image, &cfg.infer())?;
    Ok(match_detections(&dets, &scene.annotations, cfg.match_iou))
}

pub fn features_csv(rows: &[FeatureRow], dim: usize) -> String {
    let mut out = String::from("scene_id,class_id,matched");
    for i in 0..dim {
        let _ = write!(out, ",f_{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.scene_id, r.class_id, r.matched);
        for v in &r.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one CSV row per positive location of `dataset` with the features
/// `model` produces there.
pub fn export_features(model: &Detector, dataset: &Dataset, path: &Path) -> Result<usize> {
    let eval = evaluate(model, dataset, &EvalConfig::default(), "")?;
    write(path, &features_csv(&eval.positive_features, model.config().feature_dim))?;
    Ok(eval.positive_features.len())
}

/// Writes `metrics.json` and `confusion.csv` into `dir`.
pub fn write_report(eval: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&eval.report).map_err(|e| Error::contract(e.to_string()))?;
    write(&dir.join("metrics.json"), &(json + "\n"))?;
    write(&dir.join("confusion.csv"), &eval.confusion.to_csv())
}
