//! Declarative experiment files and the paired head comparison built on them.
//!
//! An experiment file is TOML. Every key is optional and unknown keys are
//! rejected:
//!
//! ```toml
//! output_dir = "runs/default"
//!
//! [data]
//! train_seed = 1
//! train_scenes = 800
//!
//! [data.generator]
//! delta = 0.08
//!
//! [detector]
//! head = "om"
//!
//! [detector.optim]
//! epochs = 12
//!
//! [study]
//! seeds = [0, 1, 2, 3, 4]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{save_model, train_with, write_train_log, Detector, DetectorConfig, EpochRecord, HeadKind};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, write_report, EvalConfig, Evaluation};
use crate::synthgen::{Dataset, GenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub generator: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_seed: 1,
            test_seed: 2,
            train_scenes: 800,
            test_scenes: 200,
            generator: GenConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn train_set(&self) -> Result<Dataset> {
        Dataset::generate(self.train_seed, self.train_scenes, &self.generator)
    }

    pub fn test_set(&self) -> Result<Dataset> {
        Dataset::generate(self.test_seed, self.test_scenes, &self.generator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Model seeds; each one trains both heads on the same data.
    pub seeds: Vec<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.detector
            .validate(self.data.generator.classes, self.data.generator.image_size)?;
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.score_threshold) || !(e.nms_iou > 0.0 && e.nms_iou < 1.0) {
            return Err(Error::Config("eval thresholds must lie in [0, 1] and (0, 1)".into()));
        }
        if !(e.match_iou > 0.0 && e.match_iou <= 1.0) {
            return Err(Error::Config("match_iou must lie in (0, 1]".into()));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved file, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// SHA-256 of the resolved config, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn with_head(&self, head: HeadKind, seed: u64) -> Self {
        let mut c = self.clone();
        c.detector.head = head;
        c.detector.seed = seed;
        c
    }

    /// Writes `config.toml` and `config.sha256` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write(&dir.join("config.toml"), self.to_toml().as_bytes())?;
        write(&dir.join("config.sha256"), format!("{}\n", self.hash()).as_bytes())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains one model and, when `dir` is given, writes `model.bin`,
/// `train_log.jsonl` and the resolved config there.
pub fn run_training(
    cfg: &ExperimentConfig,
    train: &Dataset,
    dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Detector, Vec<EpochRecord>)> {
    let (model, log) = train_with(train, &cfg.detector, on_epoch)?;
    if let Some(dir) = dir {
        cfg.write_resolved(dir)?;
        save_model(&model, &dir.join("model.bin"))?;
        write_train_log(&log, &dir.join("train_log.jsonl"))?;
    }
    Ok((model, log))
}

pub fn run_evaluation(cfg: &ExperimentConfig, model: &Detector, test: &Dataset, dir: Option<&Path>) -> Result<Evaluation> {
    let eval = evaluate(model, test, &cfg.eval, &cfg.hash())?;
    if let Some(dir) = dir {
        write_report(&eval, dir)?;
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbRecord {
    pub seed: u64,
    pub map_om: f64,
    pub map_linear: f64,
    pub inter_cos_om: Option<f64>,
    pub inter_cos_linear: Option<f64>,
    pub family_confusion_om: f64,
    pub family_confusion_linear: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbMeans {
    pub map_om: f64,
    pub map_linear: f64,
    pub inter_cos_om: Option<f64>,
    pub inter_cos_linear: Option<f64>,
    pub family_confusion_om: f64,
    pub family_confusion_linear: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbSummary {
    pub config_hash: String,
    pub records: Vec<AbRecord>,
    pub means: AbMeans,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt<'a>(xs: impl Iterator<Item = &'a Option<f64>> + Clone) -> Option<f64> {
    if xs.clone().any(Option::is_none) {
        None
    } else {
        Some(mean(xs.flatten().copied()))
    }
}

impl AbSummary {
    pub fn from_records(config_hash: String, records: Vec<AbRecord>) -> Self {
        let r = &records;
        let means = AbMeans {
            map_om: mean(r.iter().map(|x| x.map_om)),
            map_linear: mean(r.iter().map(|x| x.map_linear)),
            inter_cos_om: mean_opt(r.iter().map(|x| &x.inter_cos_om)),
            inter_cos_linear: mean_opt(r.iter().map(|x| &x.inter_cos_linear)),
            family_confusion_om: mean(r.iter().map(|x| x.family_confusion_om)),
            family_confusion_linear: mean(r.iter().map(|x| x.family_confusion_linear)),
        };
        AbSummary {
            config_hash,
            records,
            means,
        }
    }
}

/// One trained-and-evaluated head of the study.
pub struct StudyRun {
    pub seed: u64,
    pub head: HeadKind,
    pub model: Detector,
    pub evaluation: Evaluation,
}

/// Trains and evaluates the om and linear heads for every seed of
/// `cfg.study`. With `out` set, each run gets `<out>/<head>_seed<k>/` and the
/// paired table goes to `<out>/summary.json`.
pub fn run_ab_study(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut on_run: impl FnMut(&StudyRun),
) -> Result<AbSummary> {
    cfg.validate()?;
    let train = cfg.data.train_set()?;
    let test = cfg.data.test_set()?;
    let mut records = Vec::with_capacity(cfg.study.seeds.len());
    for &seed in &cfg.study.seeds {
        let mut reports = Vec::with_capacity(2);
        for head in [HeadKind::Om, HeadKind::Linear] {
            let run_cfg = cfg.with_head(head, seed);
            run_cfg.validate()?;
            let dir = out.map(|o| o.join(format!("{}_seed{seed}", head.name())));
            let (model, _) = run_training(&run_cfg, &train, dir.as_deref(), |_| {})?;
            let evaluation = run_evaluation(&run_cfg, &model, &test, dir.as_deref())?;
            reports.push(evaluation.report.clone());
            on_run(&StudyRun {
                seed,
                head,
                model,
                evaluation,
            });
        }
        let (om, lin) = (&reports[0], &reports[1]);
        records.push(AbRecord {
            seed,
            map_om: om.map,
            map_linear: lin.map,
            inter_cos_om: om.orthogonality.mean_inter_abs_cos,
            inter_cos_linear: lin.orthogonality.mean_inter_abs_cos,
            family_confusion_om: om.family_confusion,
            family_confusion_linear: lin.family_confusion,
        });
    }
    let summary = AbSummary::from_records(cfg.hash(), records);
    if let Some(out) = out {
        cfg.write_resolved(out)?;
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::contract(e.to_string()))?;
        write(&out.join("summary.json"), (json + "\n").as_bytes())?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_file_round_trips_with_the_same_hash() {
        let mut c = ExperimentConfig::default();
        c.detector.logit_scale = 7.5;
        c.data.generator.delta = 0.2;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[detector]\nheads = \"om\"", "[data.generator]\nsize = 3"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn om_head_wider_than_features_is_a_config_error() {
        let text = "[detector]\nfeature_dim = 8\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("feature_dim"), "{err}");
    }

    #[test]
    fn means_match_the_records() {
        let rec = |seed, a: f64, b: f64| AbRecord {
            seed,
            map_om: a,
            map_linear: b,
            inter_cos_om: Some(a / 2.0),
            inter_cos_linear: None,
            family_confusion_om: b,
            family_confusion_linear: a,
        };
        let s = AbSummary::from_records(String::new(), vec![rec(0, 0.2, 0.4), rec(1, 0.6, 0.0)]);
        assert!((s.means.map_om - 0.4).abs() < 1e-15);
        assert!((s.means.map_linear - 0.2).abs() < 1e-15);
        assert!((s.means.inter_cos_om.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(s.means.inter_cos_linear, None);
    }
}
