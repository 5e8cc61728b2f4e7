//! Network definition: three stride-2 blocks, a shared trunk conv, then a
//! classification branch and a regression branch of two 3x3 convs each.

use rand_distr::{Distribution, Normal};

use super::assign::Grid;
use super::config::{DetectorConfig, HeadKind};
use crate::error::{Error, Result};
use crate::ortho::{build_orthogonal_basis, om_score_rows, OrthoBasis};
use crate::seeds;
use crate::tensor::{Array, Graph, Var};

/// Focal-loss prior used for the linear head's bias, `-ln((1 - p) / p)`.
pub const PRIOR_PROB: f64 = 0.01;

const GN_EPS: f64 = 1e-5;

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamSet {
    pub(crate) fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: &str, value: Array) {
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.position(name).map(|i| &mut self.values[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Names of the final classification layer's parameters for a head kind.
pub fn head_param_names(head: HeadKind) -> &'static [&'static str] {
    if head.is_om() {
        &[]
    } else {
        &["cls.out.weight", "cls.out.bias"]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    classes: usize,
    image_size: usize,
    params: ParamSet,
    basis: Option<OrthoBasis>,
}

/// Graph nodes of one forward pass over a batch. All dense outputs have one
/// row per (image, location), images outermost.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub batch: usize,
    pub grid: Grid,
    /// Parameter nodes in `ParamSet` order.
    pub params: Vec<Var>,
    /// Shared trunk activations `[B, W, Hs, Ws]`.
    pub trunk: Var,
    /// Inputs to the final classification layer, `[B*Hs*Ws, N]`.
    pub features: Var,
    /// Class logits, or `s * cosine` for OM heads: `[B*Hs*Ws, K]`.
    pub cls: Var,
    pub ctr: Var,
    /// `(l, t, r, b)` in strides, strictly positive: `[B*Hs*Ws, 4]`.
    pub reg: Var,
}

fn conv_param(seed: u64, name: &str, out: usize, k: usize, inp: usize, std: f64) -> Array {
    let mut rng = seeds::rng(seeds::mix_label(seed, name));
    let normal = Normal::new(0.0, std).expect("positive std");
    Array::from_fn(vec![out, k, k, inp], |_| normal.sample(&mut rng))
}

fn he_std(k: usize, inp: usize) -> f64 {
    (2.0 / (k * k * inp) as f64).sqrt()
}

impl Detector {
    /// Freshly initialised detector. Every tensor is drawn from its own
    /// stream keyed by `(config.seed, name)`, so the shared layers of two
    /// configs differing only in head kind start out identical.
    pub fn new(config: DetectorConfig, classes: usize, image_size: usize) -> Result<Self> {
        config.validate(classes, image_size)?;
        let seed = config.seed;
        let w = &config.backbone_widths;
        let n = config.feature_dim;
        let mut params = ParamSet::new();
        let norm = config.norm_groups > 0;
        // normalised convs carry GN scale and shift in place of a bias
        let conv = |params: &mut ParamSet, name: &str, out: usize, inp: usize| {
            params.push(&format!("{name}.weight"), conv_param(seed, name, out, 3, inp, he_std(3, inp)));
            if norm {
                params.push(&format!("{name}.gn.weight"), Array::full(vec![out], 1.0));
                params.push(&format!("{name}.gn.bias"), Array::zeros(vec![out]));
            } else {
                params.push(&format!("{name}.bias"), Array::zeros(vec![out]));
            }
        };
        let predictor = |params: &mut ParamSet, name: &str, out: usize, inp: usize| {
            params.push(&format!("{name}.weight"), conv_param(seed, name, out, 3, inp, 0.01));
            params.push(&format!("{name}.bias"), Array::zeros(vec![out]));
        };
        let mut prev = 3;
        for (i, &width) in w[..3].iter().enumerate() {
            conv(&mut params, &format!("backbone.{i}"), width, prev);
            prev = width;
        }
        let trunk = w[3];
        conv(&mut params, "trunk", trunk, prev);
        conv(&mut params, "cls.0", n, trunk);
        // the feature projection is left unnormalised so it need not
        // spread energy over every dimension
        predictor(&mut params, "cls.1", n, n);
        conv(&mut params, "reg.0", trunk, trunk);
        conv(&mut params, "reg.1", trunk, trunk);
        // prediction layers start small so early offsets sit near one stride
        predictor(&mut params, "reg.out", 4, trunk);
        predictor(&mut params, "ctr.out", 1, trunk);
        let k_out = config.head.outputs(classes);
        let basis = if config.head.is_om() {
            Some(build_orthogonal_basis(seed, k_out, n, config.basis_ksize)?)
        } else {
            let mut rng = seeds::rng(seeds::mix_label(seed, "cls.out"));
            let normal = Normal::new(0.0, 0.01).expect("positive std");
            params.push(
                "cls.out.weight",
                Array::from_fn(vec![k_out, n], |_| normal.sample(&mut rng)),
            );
            let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
            let mut bias = Array::full(vec![k_out], prior);
            if config.head.is_softmax() {
                // background column starts as the likely one
                bias.data_mut()[k_out - 1] = 0.0;
            }
            params.push("cls.out.bias", bias);
            None
        };
        Ok(Detector {
            config,
            classes,
            image_size,
            params,
            basis,
        })
    }

    pub(crate) fn from_parts(
        config: DetectorConfig,
        classes: usize,
        image_size: usize,
        params: ParamSet,
        basis: Option<OrthoBasis>,
    ) -> Result<Self> {
        let fresh = Detector::new(config.clone(), classes, image_size)?;
        if fresh.params.names != params.names {
            return Err(Error::contract("parameter names do not match the configuration"));
        }
        for ((name, a), b) in fresh.params.iter().zip(&params.values) {
            if a.shape() != b.shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if basis.is_some() != config.head.is_om() {
            return Err(Error::contract("basis presence does not match the head kind"));
        }
        Ok(Detector {
            config,
            classes,
            image_size,
            params,
            basis,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn basis(&self) -> Option<&OrthoBasis> {
        self.basis.as_ref()
    }

    pub fn grid(&self) -> Grid {
        Grid::for_image(self.image_size, self.config.stride)
    }

    /// Builds the forward graph for a batch of `[3, S, S]` images.
    pub fn forward(&self, g: &mut Graph, images: &[&Array]) -> Result<ForwardPass> {
        let s = self.image_size;
        if images.is_empty() {
            return Err(Error::contract("forward of an empty batch"));
        }
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.shape() != [3, s, s] {
                return Err(Error::contract(format!(
                    "image shape {:?}, model expects [3, {s}, {s}]",
                    img.shape()
                )));
            }
            data.extend_from_slice(img.data());
        }
        let batch = images.len();
        let x = g.constant(Array::new(vec![batch, 3, s, s], data)?);
        let params: Vec<Var> = self.params.values.iter().map(|v| g.param(v.clone())).collect();
        let p = |name: &str| -> Var { params[self.params.position(name).expect("known parameter")] };
        let groups = self.config.norm_groups;
        let conv = |g: &mut Graph, x: Var, name: &str, stride: usize, relu: bool| -> Result<Var> {
            let y = g.conv2d(x, p(&format!("{name}.weight")), stride, 1)?;
            let y = match self.params.position(&format!("{name}.bias")) {
                Some(i) => g.add_channel_bias(y, params[i])?,
                None => {
                    let (gamma, beta) = (p(&format!("{name}.gn.weight")), p(&format!("{name}.gn.bias")));
                    g.group_norm(y, gamma, beta, groups, GN_EPS)?
                }
            };
            if relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut h = x;
        for i in 0..3 {
            h = conv(g, h, &format!("backbone.{i}"), 2, true)?;
        }
        let trunk = conv(g, h, "trunk", 1, true)?;

        let c = conv(g, trunk, "cls.0", 1, true)?;
        // no ReLU before the final layer: signed features can point at any prototype
        let c = conv(g, c, "cls.1", 1, false)?;
        let features = g.channels_last(c)?;
        let cls = match &self.basis {
            Some(basis) => {
                let cos = om_score_rows(g, features, basis)?;
                g.scale(cos, self.config.logit_scale)?
            }
            None => {
                let out = g.transpose(p("cls.out.weight"))?;
                let out = g.matmul(features, out)?;
                g.add_row_bias(out, p("cls.out.bias"))?
            }
        };

        let r = conv(g, trunk, "reg.0", 1, true)?;
        let r = conv(g, r, "reg.1", 1, true)?;
        let off = conv(g, r, "reg.out", 1, false)?;
        let off = g.channels_last(off)?;
        let reg = g.exp(off)?;
        let ctr = conv(g, r, "ctr.out", 1, false)?;
        let ctr = g.channels_last(ctr)?;

        Ok(ForwardPass {
            batch,
            grid: self.grid(),
            params,
            trunk,
            features,
            cls,
            ctr,
            reg,
        })
    }

    /// Applies only the final classification layer to `[M, N]` feature rows.
    pub fn classify_features(&self, features: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let out = match &self.basis {
            Some(basis) => {
                let cos = om_score_rows(&mut g, f, basis)?;
                g.scale(cos, self.config.logit_scale)?
            }
            None => {
                let w = g.constant(self.params.get("cls.out.weight").expect("linear head").clone());
                let b = g.constant(self.params.get("cls.out.bias").expect("linear head").clone());
                crate::ortho::linear_score_rows(&mut g, f, w, b)?
            }
        };
        Ok(g.value(out).clone())
    }

    /// Zeroes the layer producing classification scores (the last cls-branch
    /// conv for OM, the 1x1 classifier for linear) and the regression and
    /// centerness outputs.
    pub fn zero_final_layers(&mut self) {
        let mut names = vec!["reg.out.weight", "reg.out.bias", "ctr.out.weight", "ctr.out.bias"];
        if self.config.head.is_om() {
            names.extend(["cls.1.weight", "cls.1.bias", "cls.1.gn.weight", "cls.1.gn.bias"]);
        } else {
            names.extend(head_param_names(self.config.head));
        }
        for n in names {
            if let Some(v) = self.params.get_mut(n) {
                v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// Plain values of one forward pass for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutputs {
    pub grid: Grid,
    /// `[Hs*Ws, K]` logits or scaled cosines.
    pub cls: Array,
    /// `[Hs*Ws]` centerness logits.
    pub ctr: Array,
    /// `[Hs*Ws, 4]` offsets in strides.
    pub reg: Array,
    /// `[Hs*Ws, N]` inputs to the final classification layer.
    pub features: Array,
}

impl Detector {
    /// Runs the network on one image and returns `(cls [Hs, Ws, K],
    /// ctr [Hs, Ws], reg [Hs, Ws, 4])` together with the feature rows.
    pub fn predict(&self, image: &Array) -> Result<DenseOutputs> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, &[image])?;
        let grid = fp.grid;
        let k = g.shape(fp.cls)[1];
        Ok(DenseOutputs {
            grid,
            cls: g.value(fp.cls).clone().reshaped(vec![grid.rows, grid.cols, k])?,
            ctr: g.value(fp.ctr).clone().reshaped(vec![grid.rows, grid.cols])?,
            reg: g.value(fp.reg).clone().reshaped(vec![grid.rows, grid.cols, 4])?,
            features: g.value(fp.features).clone(),
        })
    }
}
