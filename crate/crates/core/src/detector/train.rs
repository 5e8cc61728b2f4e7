use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, DenseTargets};
use super::config::{AuxLoss, DetectorConfig, OptimConfig};
use super::model::{Detector, ForwardPass};
use crate::error::{Error, Result};
use crate::losses;
use crate::seeds;
use crate::synthgen::{Annotation, Dataset, Scene};
use crate::tensor::{Array, Graph, Var};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_ctr: f64,
    pub loss_aux: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub aux: f64,
    pub total: f64,
}

/// SGD with momentum and coupled weight decay:
/// `d = g + wd * p`, `v = m * v + d` (`v = d` on the first step), `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, params: usize) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: vec![None; params],
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.buffers.len());
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            let d: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .map(|(&p, &g)| g + self.weight_decay * p)
                .collect();
            let v = match buf {
                Some(v) => {
                    v.iter_mut().zip(&d).for_each(|(v, d)| *v = self.momentum * *v + d);
                    v
                }
                None => buf.insert(d),
            };
            p.data_mut().iter_mut().zip(v.iter()).for_each(|(p, v)| *p -= lr * v);
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}

struct BatchLoss {
    total: Var,
    parts: LossParts,
}

fn batch_loss(
    model: &Detector,
    g: &mut Graph,
    fp: &ForwardPass,
    targets: &[DenseTargets],
    annotations: &[&[Annotation]],
) -> Result<BatchLoss> {
    let cfg = model.config();
    let classes = model.classes();
    let per_image = fp.grid.len();
    let stride = fp.grid.stride as f64;

    let mut cls_t = Vec::with_capacity(targets.len() * per_image * classes);
    let mut labels = Vec::with_capacity(targets.len() * per_image);
    let mut pos = Vec::new();
    let mut pos_labels = Vec::new();
    let mut centers = Vec::new();
    let mut gt = Vec::new();
    let mut ctr_t = Vec::new();
    for (b, (t, anns)) in targets.iter().zip(annotations).enumerate() {
        cls_t.extend_from_slice(t.cls.data());
        for loc in 0..per_image {
            match t.assigned[loc] {
                Some(k) => {
                    let a = &anns[k];
                    labels.push(a.class_id);
                    pos.push(b * per_image + loc);
                    pos_labels.push(a.class_id);
                    let (x, y) = t.grid.center(loc);
                    centers.extend_from_slice(&[x, y, x, y]);
                    gt.extend_from_slice(&a.bbox);
                    ctr_t.push(t.centerness[loc]);
                }
                None => labels.push(classes),
            }
        }
    }

    let mut parts = LossParts::default();
    let cls = if cfg.head.is_softmax() {
        losses::softmax_cross_entropy(g, fp.cls, &labels)?
    } else {
        let t = Array::new(vec![labels.len(), classes], cls_t)?;
        losses::sigmoid_focal_loss(g, fp.cls, &t, cfg.focal_alpha, cfg.focal_gamma)?
    };
    parts.cls = g.value(cls.value).item();
    let mut total = cls.value;

    if !pos.is_empty() {
        let p = pos.len();
        let off = g.select_rows(fp.reg, &pos)?;
        let signs = Array::from_fn(vec![p, 4], |i| if i % 4 < 2 { -stride } else { stride });
        let signs = g.constant(signs);
        let delta = g.mul(off, signs)?;
        let centers = g.constant(Array::new(vec![p, 4], centers)?);
        let boxes = g.add(centers, delta)?;
        let reg = losses::giou_loss(g, boxes, &Array::new(vec![p, 4], gt)?)?;
        parts.reg = g.value(reg.value).item();
        total = g.add(total, reg.value)?;

        let ctr = g.select_rows(fp.ctr, &pos)?;
        let ctr = losses::centerness_loss(g, ctr, &Array::new(vec![p, 1], ctr_t)?)?;
        parts.ctr = g.value(ctr.value).item();
        total = g.add(total, ctr.value)?;

        if cfg.aux_loss == AuxLoss::Opl {
            let feats = g.select_rows(fp.features, &pos)?;
            let aux = losses::opl_loss(g, feats, &pos_labels)?;
            if !aux.skipped {
                parts.aux = g.value(aux.value).item();
                let weighted = g.scale(aux.value, cfg.aux_weight)?;
                total = g.add(total, weighted)?;
            }
        }
    }
    parts.total = g.value(total).item();
    Ok(BatchLoss { total, parts })
}

/// Owns a model under training together with its optimizer state.
pub struct Trainer {
    model: Detector,
    sgd: Sgd,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Detector) -> Self {
        let o = &model.config().optim;
        let sgd = Sgd::new(o.momentum, o.weight_decay, model.params().len());
        Trainer {
            model,
            sgd,
            iteration: 0,
        }
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    pub fn into_model(self) -> Detector {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn targets(&self, scenes: &[&Scene]) -> Vec<DenseTargets> {
        let grid = self.model.grid();
        let r = self.model.config().center_radius;
        scenes
            .iter()
            .map(|s| assign_targets(&s.annotations, self.model.classes(), grid, r))
            .collect()
    }

    /// Loss of the current parameters on `scenes`, without updating.
    pub fn loss(&self, scenes: &[&Scene]) -> Result<LossParts> {
        let mut g = Graph::new();
        let images: Vec<&Array> = scenes.iter().map(|s| &s.image).collect();
        let fp = self.model.forward(&mut g, &images)?;
        let anns: Vec<&[Annotation]> = scenes.iter().map(|s| s.annotations.as_slice()).collect();
        Ok(batch_loss(&self.model, &mut g, &fp, &self.targets(scenes), &anns)?.parts)
    }

    /// One SGD update on `scenes` at learning rate `lr`. Returns the loss
    /// before the update.
    pub fn step(&mut self, scenes: &[&Scene], lr: f64) -> Result<LossParts> {
        let mut g = Graph::new();
        let images: Vec<&Array> = scenes.iter().map(|s| &s.image).collect();
        let fp = self.model.forward(&mut g, &images)?;
        let anns: Vec<&[Annotation]> = scenes.iter().map(|s| s.annotations.as_slice()).collect();
        let targets = self.targets(scenes);
        let loss = batch_loss(&self.model, &mut g, &fp, &targets, &anns)?;
        g.backward(loss.total)?;
        let mut grads: Vec<Array> = fp
            .params
            .iter()
            .zip(self.model.params().values())
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(p.shape().to_vec())))
            .collect();
        clip_grad_norm(&mut grads, self.model.config().optim.grad_clip);
        self.sgd.step(self.model.params_mut().values_mut(), &grads, lr);
        self.iteration += 1;
        if let Some((name, _)) = self.model.params().iter().find(|(_, v)| !v.all_finite()) {
            return Err(Error::NonFinite(format!("parameter {name} after update")));
        }
        Ok(loss.parts)
    }

    /// One pass over `scenes` in a seeded order; returns the epoch's mean
    /// losses.
    pub fn run_epoch(&mut self, scenes: &[Scene], epoch: usize) -> Result<EpochRecord> {
        let optim: OptimConfig = self.model.config().optim.clone();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = seeds::rng(seeds::mix(seeds::mix_label(self.model.config().seed, "shuffle"), epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(optim.batch_size).enumerate() {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let lr = optim.lr_at(epoch, self.iteration);
            let parts = self.step(&batch, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "epoch {epoch}, batch {b}: {what}; running means so far cls {:.6} reg {:.6} ctr {:.6} aux {:.6}",
                    sum.cls / batches.max(1) as f64,
                    sum.reg / batches.max(1) as f64,
                    sum.ctr / batches.max(1) as f64,
                    sum.aux / batches.max(1) as f64,
                )),
                other => other,
            })?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {b}: loss cls {} reg {} ctr {} aux {}",
                    parts.cls, parts.reg, parts.ctr, parts.aux
                )));
            }
            sum.cls += parts.cls;
            sum.reg += parts.reg;
            sum.ctr += parts.ctr;
            sum.aux += parts.aux;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        Ok(EpochRecord {
            epoch,
            loss_cls: sum.cls / n,
            loss_reg: sum.reg / n,
            loss_ctr: sum.ctr / n,
            loss_aux: sum.aux / n,
            lr: optim.epoch_lr(epoch),
        })
    }
}

/// Trains a fresh detector on `dataset` for `config.optim.epochs` epochs.
/// `on_epoch` sees each log record as it is produced.
pub fn train_with(
    dataset: &Dataset,
    config: &DetectorConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Detector, Vec<EpochRecord>)> {
    let model = Detector::new(config.clone(), dataset.config.classes, dataset.config.image_size)?;
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let mut trainer = Trainer::new(model);
    let mut log = Vec::with_capacity(config.optim.epochs);
    for epoch in 0..config.optim.epochs {
        let rec = trainer.run_epoch(&dataset.scenes, epoch)?;
        on_epoch(&rec);
        log.push(rec);
    }
    Ok((trainer.into_model(), log))
}

pub fn train(dataset: &Dataset, config: &DetectorConfig) -> Result<(Detector, Vec<EpochRecord>)> {
    train_with(dataset, config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_decay_shrinks_idle_parameters() {
        let (lr, wd) = (0.1, 0.01);
        let mut sgd = Sgd::new(0.0, wd, 1);
        let mut p = vec![Array::from_vec(vec![1.0, -2.0])];
        let zero = vec![Array::zeros(vec![2])];
        for step in 1..=3 {
            sgd.step(&mut p, &zero, lr);
            let f = (1.0 - lr * wd).powi(step);
            assert!((p[0].data()[0] - f).abs() < 1e-15);
            assert!((p[0].data()[1] + 2.0 * f).abs() < 1e-15);
        }
        // with momentum the first step is the same identity
        let mut sgd = Sgd::new(0.9, wd, 1);
        let mut p = vec![Array::from_vec(vec![3.0])];
        sgd.step(&mut p, &[Array::zeros(vec![1])], lr);
        assert!((p[0].data()[0] - 3.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut sgd = Sgd::new(0.5, 0.0, 1);
        let mut p = vec![Array::from_vec(vec![0.0])];
        let g = vec![Array::from_vec(vec![1.0])];
        sgd.step(&mut p, &g, 1.0);
        sgd.step(&mut p, &g, 1.0);
        assert_eq!(p[0].data()[0], -2.5);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Array::from_vec(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-6);
        let mut g = vec![Array::from_vec(vec![0.3, 0.4])];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }
}
