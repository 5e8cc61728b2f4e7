use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Final classification layer of the detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Frozen orthonormal prototypes, cosine scores, sigmoid focal loss.
    Om,
    /// Learned 1x1 classifier with bias, sigmoid focal loss.
    Linear,
    /// Prototypes for every class plus background, softmax cross-entropy.
    OmSoftmax,
    /// Learned classifier over classes plus background, softmax cross-entropy.
    LinearSoftmax,
}

impl HeadKind {
    pub fn is_om(self) -> bool {
        matches!(self, HeadKind::Om | HeadKind::OmSoftmax)
    }

    pub fn is_softmax(self) -> bool {
        matches!(self, HeadKind::OmSoftmax | HeadKind::LinearSoftmax)
    }

    /// Rows of the final layer for `classes` foreground classes.
    pub fn outputs(self, classes: usize) -> usize {
        if self.is_softmax() {
            classes + 1
        } else {
            classes
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Om => "om",
            HeadKind::Linear => "linear",
            HeadKind::OmSoftmax => "om_softmax",
            HeadKind::LinearSoftmax => "linear_softmax",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "om" => Ok(HeadKind::Om),
            "linear" => Ok(HeadKind::Linear),
            "om_softmax" => Ok(HeadKind::OmSoftmax),
            "linear_softmax" => Ok(HeadKind::LinearSoftmax),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    None,
    Opl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Learning rate at the reference batch size of 8; scaled linearly with
    /// `batch_size`.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch indices (0-based) from which the rate is multiplied by
    /// `decay_factor` once more.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Linear warm-up length in iterations, starting from a third of the rate.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 24,
            decay_epochs: vec![16, 22],
            decay_factor: 0.1,
            batch_size: 8,
            warmup_iters: 100,
            grad_clip: 35.0,
        }
    }
}

impl OptimConfig {
    pub const REFERENCE_BATCH: usize = 8;

    pub fn base_lr(&self) -> f64 {
        self.lr * self.batch_size as f64 / Self::REFERENCE_BATCH as f64
    }

    /// Step-decayed rate for a 0-based epoch, before warm-up.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr() * self.decay_factor.powi(drops as i32)
    }

    pub fn lr_at(&self, epoch: usize, iteration: usize) -> f64 {
        let lr = self.epoch_lr(epoch);
        if iteration < self.warmup_iters {
            let ratio = 1.0 / 3.0;
            let k = iteration as f64 / self.warmup_iters as f64;
            lr * (ratio + (1.0 - ratio) * k)
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Widths of the three stride-2 backbone blocks followed by the shared
    /// trunk width.
    pub backbone_widths: Vec<usize>,
    pub stride: usize,
    /// Group-normalisation groups after every hidden conv; `0` disables.
    pub norm_groups: usize,
    /// Width `N` of the features entering the final classification layer.
    pub feature_dim: usize,
    pub head: HeadKind,
    pub aux_loss: AuxLoss,
    pub aux_weight: f64,
    /// Multiplier applied to cosine scores before the loss (OM heads only).
    pub logit_scale: f64,
    /// Spatial size of the random kernel the prototypes are pooled from.
    pub basis_ksize: usize,
    /// Centre-sampling radius in strides.
    pub center_radius: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone_widths: vec![16, 32, 64, 64],
            stride: 8,
            norm_groups: 8,
            feature_dim: 64,
            head: HeadKind::Om,
            aux_loss: AuxLoss::None,
            aux_weight: 0.5,
            logit_scale: 20.0,
            basis_ksize: 3,
            center_radius: 1.5,
            focal_alpha: crate::losses::FOCAL_ALPHA,
            focal_gamma: crate::losses::FOCAL_GAMMA,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Checks internal consistency and compatibility with `classes` and an
    /// `image_size x image_size` input.
    pub fn validate(&self, classes: usize, image_size: usize) -> Result<()> {
        if self.backbone_widths.len() != 4 || self.backbone_widths.contains(&0) {
            return Err(Error::Config(
                "backbone_widths must list three block widths and a trunk width".into(),
            ));
        }
        if self.stride != 8 {
            return Err(Error::Config(format!(
                "three stride-2 blocks give stride 8, config says {}",
                self.stride
            )));
        }
        if image_size % self.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} does not divide image size {image_size}",
                self.stride
            )));
        }
        if self.norm_groups > 0 {
            let widths = self.backbone_widths.iter().chain([&self.feature_dim]);
            if let Some(w) = widths.into_iter().find(|&&w| w % self.norm_groups != 0) {
                return Err(Error::Config(format!(
                    "norm_groups {} does not divide layer width {w}",
                    self.norm_groups
                )));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let rows = self.head.outputs(classes);
        if self.head.is_om() && rows > self.feature_dim {
            return Err(Error::Config(format!(
                "the {} head needs {rows} orthogonal prototypes but the feature dimension is only {}; \
                 raise feature_dim or use fewer classes",
                self.head.name(),
                self.feature_dim
            )));
        }
        if self.logit_scale <= 0.0 {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        if self.basis_ksize == 0 {
            return Err(Error::Config("basis_ksize must be at least 1".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) || self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_alpha must be in (0, 1), focal_gamma >= 0".into()));
        }
        let o = &self.optim;
        if o.lr <= 0.0 || o.batch_size == 0 || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::Config(
                "optimizer needs lr > 0, batch_size > 0, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if self.center_radius <= 0.0 || self.aux_weight < 0.0 {
            return Err(Error::Config("center_radius must be positive, aux_weight non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let o = OptimConfig {
            warmup_iters: 0,
            ..OptimConfig::default()
        };
        assert_eq!(o.epoch_lr(0), 0.1);
        assert_eq!(o.epoch_lr(15), 0.1);
        assert!((o.epoch_lr(16) - 0.01).abs() < 1e-15);
        assert!((o.epoch_lr(23) - 0.001).abs() < 1e-15);
        let o = OptimConfig {
            batch_size: 16,
            ..OptimConfig::default()
        };
        assert_eq!(o.base_lr(), 0.2);
        assert!((o.lr_at(0, 0) - 0.2 / 3.0).abs() < 1e-15);
        assert_eq!(o.lr_at(0, 100), 0.2);
    }

    #[test]
    fn om_needs_room_for_prototypes() {
        let c = DetectorConfig {
            feature_dim: 8,
            ..DetectorConfig::default()
        };
        assert!(c.validate(9, 64).is_err());
        assert!(c.validate(8, 64).is_ok());
        let soft = DetectorConfig {
            head: HeadKind::OmSoftmax,
            ..c.clone()
        };
        assert!(soft.validate(8, 64).is_err());
        let lin = DetectorConfig {
            head: HeadKind::Linear,
            ..c
        };
        assert!(lin.validate(9, 64).is_ok());
    }
}
