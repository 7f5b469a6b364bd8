//! A small CNN engine with hand-written backpropagation.
//!
//! A [`Model`] is an ordered list of named layers. `forward` records a tape of
//! per-layer caches; `backward` walks the tape in reverse and returns parameter
//! gradients (aligned with [`Layer::params`]) and the input gradient.
//!
//! Batch-norm in train mode normalises with batch statistics and reports them on
//! the tape; the caller folds them into the running averages with
//! [`Model::update_running_stats`], so `forward` itself never mutates.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::conv::{self, ConvGeometry};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};
use crate::tucker::{recover, ConvWeight, StagedWeights, Tucker2Factors};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvDense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvFactorized {
    pub factors: Tucker2Factors,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    ConvDense(ConvDense),
    ConvFactorized(ConvFactorized),
    Linear(Linear),
    ReLU,
    MaxPool { window: usize, stride: usize },
    AvgPoolGlobal,
    BatchNorm(BatchNorm),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::ConvDense(_) => "conv_dense",
            Layer::ConvFactorized(_) => "conv_factorized",
            Layer::Linear(_) => "linear",
            Layer::ReLU => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPoolGlobal => "avgpool_global",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten => "flatten",
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::ConvDense(c) => vec![&c.weight, &c.bias],
            Layer::ConvFactorized(c) => vec![&c.factors.u1, &c.factors.u2, &c.factors.g, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::ConvDense(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvFactorized(c) => vec![&mut c.factors.u1, &mut c.factors.u2, &mut c.factors.g, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    /// Indices into [`Layer::params`] that count as weights (subject to weight decay).
    pub fn weight_indices(&self) -> &'static [usize] {
        match self {
            Layer::ConvDense(_) | Layer::Linear(_) => &[0],
            Layer::ConvFactorized(_) => &[0, 1, 2],
            _ => &[],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Output shape (without the batch axis) for an input shape (without the batch axis).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::ConvDense(c) => conv_out_shape(input, c.weight.shape()[1], c.weight.shape()[0], c.weight.shape()[2], c.stride, c.padding),
            Layer::ConvFactorized(c) => {
                let (o, i, k) = c.factors.dims();
                conv_out_shape(input, i, o, k, c.stride, c.padding)
            }
            Layer::Linear(l) => match input {
                [f] if *f == l.weight.shape()[1] => Ok(vec![l.weight.shape()[0]]),
                _ => shape_err(format!("linear expects [{}] input, got {:?}", l.weight.shape()[1], input)),
            },
            Layer::ReLU => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } => match input {
                [c, h, w] => Ok(vec![*c, conv::out_size(*h, *window, *stride, 0)?, conv::out_size(*w, *window, *stride, 0)?]),
                _ => shape_err(format!("maxpool expects C×H×W, got {:?}", input)),
            },
            Layer::AvgPoolGlobal => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => shape_err(format!("global average pool expects C×H×W, got {:?}", input)),
            },
            Layer::BatchNorm(b) => {
                if input.len() == 3 && input[0] == b.gamma.len() || input.len() == 1 && input[0] == b.gamma.len() {
                    Ok(input.to_vec())
                } else {
                    shape_err(format!("batchnorm over {} channels got {:?}", b.gamma.len(), input))
                }
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn conv_out_shape(input: &[usize], cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Vec<usize>> {
    match input {
        [c, h, w] if *c == cin => Ok(vec![cout, conv::out_size(*h, k, stride, padding)?, conv::out_size(*w, k, stride, padding)?]),
        _ => shape_err(format!("conv expects {cin}×H×W input, got {:?}", input)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<NamedLayer>,
    /// `C × H × W`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Names of the convolution layers eligible for Tucker-2 compression.
    pub compressible: Vec<String>,
}

impl Model {
    pub fn new(layers: Vec<NamedLayer>, input_shape: [usize; 3], num_classes: usize, compressible: Vec<String>) -> Result<Self> {
        let m = Self {
            layers,
            input_shape,
            num_classes,
            compressible,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.layers.iter().find(|l| !seen.insert(l.name.as_str())) {
            return invalid(format!("duplicate layer name {:?}", dup.name));
        }
        let mut shape = self.input_shape.to_vec();
        for nl in &self.layers {
            shape = nl
                .layer
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {:?}: {e}", nl.name)))?;
        }
        if shape != [self.num_classes] {
            return shape_err(format!("model output {:?} is not [{}] class logits", shape, self.num_classes));
        }
        for name in &self.compressible {
            match self.layer_index(name).map(|i| &self.layers[i].layer) {
                Some(Layer::ConvDense(_)) | Some(Layer::ConvFactorized(_)) => {}
                _ => return invalid(format!("compressible layer {name:?} is not a convolution")),
            }
        }
        Ok(())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.layer.param_count()).sum()
    }

    /// Parameter count of the compressible layers' weights only (no biases).
    pub fn compressible_weight_params(&self) -> usize {
        self.compressible
            .iter()
            .filter_map(|n| self.layer_index(n))
            .map(|i| match &self.layers[i].layer {
                Layer::ConvDense(c) => c.weight.len(),
                Layer::ConvFactorized(c) => c.factors.param_count(),
                _ => 0,
            })
            .sum()
    }

    pub fn is_factorized(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.layer, Layer::ConvFactorized(_)))
    }

    /// Dense weights of the compressible layers, in order; factorized layers are recovered.
    pub fn compressible_weights(&self) -> Result<Vec<(String, ConvWeight)>> {
        self.compressible
            .iter()
            .map(|n| {
                let i = self.layer_index(n).ok_or_else(|| Error::InvalidArgument(format!("no layer {n:?}")))?;
                let w = match &self.layers[i].layer {
                    Layer::ConvDense(c) => ConvWeight::new(c.weight.clone())?,
                    Layer::ConvFactorized(c) => recover(&c.factors)?,
                    _ => return invalid(format!("layer {n:?} is not a convolution")),
                };
                Ok((n.clone(), w))
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let expect = [x.shape()[0], self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        if x.shape() != expect {
            return shape_err(format!("model input {:?} does not match B×{:?}", x.shape(), self.input_shape));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for nl in &self.layers {
            let (out, cache) = layer_forward(&nl.layer, h, mode).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {:?}: {m}", nl.name)),
                other => other,
            })?;
            caches.push(cache);
            h = out;
        }
        Ok(ForwardPass { logits: h, caches })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    pub fn backward(&self, pass: &ForwardPass, dlogits: &Tensor, need: GradRequest) -> Result<(Option<Gradients>, Option<Tensor>)> {
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut d = dlogits.clone();
        let n = self.layers.len();
        for li in (0..n).rev() {
            let want_input = li > 0 || need.input;
            let (g, dx) = layer_backward(&self.layers[li].layer, &pass.caches[li], &d, need.params, want_input)?;
            grads[li] = g;
            match dx {
                Some(dx) => d = dx,
                None => {
                    debug_assert_eq!(li, 0);
                }
            }
        }
        let input = if need.input { Some(d) } else { None };
        Ok((if need.params { Some(Gradients { layers: grads }) } else { None }, input))
    }

    /// Fold train-mode batch statistics recorded on `pass` into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (nl, cache) in self.layers.iter_mut().zip(&pass.caches) {
            if let (Layer::BatchNorm(bn), Cache::BatchNorm { batch_stats: Some((mean, var)), count, .. }) = (&mut nl.layer, cache) {
                let unbiased = if *count > 1 { *count as f64 / (*count as f64 - 1.0) } else { 1.0 };
                for c in 0..mean.len() {
                    let rm = &mut bn.running_mean.data_mut()[c];
                    *rm = (1.0 - bn.momentum) * *rm + bn.momentum * mean[c];
                    let rv = &mut bn.running_var.data_mut()[c];
                    *rv = (1.0 - bn.momentum) * *rv + bn.momentum * var[c] * unbiased;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradRequest {
    pub params: bool,
    pub input: bool,
}

impl GradRequest {
    pub const ALL: Self = Self { params: true, input: true };
    pub const PARAMS: Self = Self { params: true, input: false };
    pub const INPUT: Self = Self { params: false, input: true };
}

/// Per-layer gradients aligned with [`Layer::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| l.layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }
}

pub struct ForwardPass {
    pub logits: Tensor,
    caches: Vec<Cache>,
}

enum Cache {
    Conv {
        cols: Vec<f64>,
        geometry: ConvGeometry,
    },
    Factorized {
        staged: StagedWeights,
        stages: [(Vec<f64>, ConvGeometry); 3],
    },
    Linear {
        input: Tensor,
    },
    ReLU {
        mask: Vec<bool>,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    BatchNorm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
        count: usize,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

fn layer_forward(layer: &Layer, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    match layer {
        Layer::ConvDense(c) => {
            let f = conv::conv2d(&x, &c.weight, Some(c.bias.data()), c.stride, c.padding)?;
            Ok((f.y, Cache::Conv { cols: f.cols, geometry: f.geometry }))
        }
        Layer::ConvFactorized(c) => {
            let staged = StagedWeights::from_factors(&c.factors)?;
            let s1 = conv::conv2d(&x, &staged.reduce, None, 1, 0)?;
            let s2 = conv::conv2d(&s1.y, &staged.core, None, c.stride, c.padding)?;
            let s3 = conv::conv2d(&s2.y, &staged.expand, Some(c.bias.data()), 1, 0)?;
            let y = s3.y;
            Ok((
                y,
                Cache::Factorized {
                    staged,
                    stages: [(s1.cols, s1.geometry), (s2.cols, s2.geometry), (s3.cols, s3.geometry)],
                },
            ))
        }
        Layer::Linear(l) => {
            let (b, f) = x.dims2()?;
            let out = l.weight.shape()[0];
            if f != l.weight.shape()[1] {
                return shape_err(format!("linear expects {} features, got {}", l.weight.shape()[1], f));
            }
            let mut y = vec![0.0; b * out];
            for row in y.chunks_mut(out) {
                row.copy_from_slice(l.bias.data());
            }
            gemm(b, f, out, 1.0, x.data(), false, l.weight.data(), true, 1.0, &mut y);
            Ok((Tensor::new(vec![b, out], y)?, Cache::Linear { input: x }))
        }
        Layer::ReLU => {
            let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
            let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
            Ok((y, Cache::ReLU { mask }))
        }
        Layer::MaxPool { window, stride } => {
            let (b, c, h, w) = dims4(&x)?;
            let ho = conv::out_size(h, *window, *stride, 0)?;
            let wo = conv::out_size(w, *window, *stride, 0)?;
            let mut out = Vec::with_capacity(b * c * ho * wo);
            let mut argmax = Vec::with_capacity(b * c * ho * wo);
            for plane in 0..b * c {
                let base = plane * h * w;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for i in 0..*window {
                            for j in 0..*window {
                                let idx = base + (oh * stride + i) * w + ow * stride + j;
                                if x.data()[idx] > best {
                                    best = x.data()[idx];
                                    at = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
            Ok((
                Tensor::new(vec![b, c, ho, wo], out)?,
                Cache::MaxPool { argmax, input_shape: x.shape().to_vec() },
            ))
        }
        Layer::AvgPoolGlobal => {
            let (b, c, h, w) = dims4(&x)?;
            let hw = (h * w) as f64;
            let out: Vec<f64> = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
            Ok((Tensor::new(vec![b, c], out)?, Cache::AvgPool { input_shape: x.shape().to_vec() }))
        }
        Layer::BatchNorm(bn) => batchnorm_forward(bn, x, mode),
        Layer::Flatten => {
            let shape = x.shape().to_vec();
            let y = x.flatten_from(1)?;
            Ok((y, Cache::Flatten { input_shape: shape }))
        }
    }
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        s => shape_err(format!("expected B×C×H×W, got {:?}", s)),
    }
}

/// `(batch, channels, spatial)` view for 2-D (`B×C`) or 4-D inputs.
fn bn_view(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[b, c] => Ok((b, c, 1)),
        &[b, c, h, w] => Ok((b, c, h * w)),
        s => shape_err(format!("batchnorm expects B×C or B×C×H×W, got {:?}", s)),
    }
}

fn batchnorm_forward(bn: &BatchNorm, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    let (b, c, s) = bn_view(&x)?;
    if c != bn.gamma.len() {
        return shape_err(format!("batchnorm over {} channels got {}", bn.gamma.len(), c));
    }
    let count = b * s;
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..b {
                for ch in 0..c {
                    mean[ch] += x.data()[(n * c + ch) * s..][..s].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..b {
                for ch in 0..c {
                    var[ch] += x.data()[(n * c + ch) * s..][..s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut x_hat = x;
    let mut y = x_hat.clone();
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * s;
            for (xh, yv) in x_hat.data_mut()[off..off + s].iter_mut().zip(&mut y.data_mut()[off..off + s]) {
                *xh = (*xh - mean[ch]) * inv_std[ch];
                *yv = bn.gamma.data()[ch] * *xh + bn.beta.data()[ch];
            }
        }
    }
    Ok((y, Cache::BatchNorm { x_hat, inv_std, batch_stats, count }))
}

fn layer_backward(layer: &Layer, cache: &Cache, dy: &Tensor, want_params: bool, want_input: bool) -> Result<(Vec<Tensor>, Option<Tensor>)> {
    match (layer, cache) {
        (Layer::ConvDense(c), Cache::Conv { cols, geometry }) => {
            let g = conv::conv2d_backward(cols, geometry, &c.weight, dy, want_params, want_input)?;
            let params = if want_params {
                vec![g.dw.expect("dw"), Tensor::new(vec![c.bias.len()], g.db.expect("db"))?]
            } else {
                vec![]
            };
            Ok((params, g.dx))
        }
        (Layer::ConvFactorized(c), Cache::Factorized { staged, stages }) => {
            let g3 = conv::conv2d_backward(&stages[2].0, &stages[2].1, &staged.expand, dy, want_params, true)?;
            let g2 = conv::conv2d_backward(&stages[1].0, &stages[1].1, &staged.core, g3.dx.as_ref().expect("dx"), want_params, true)?;
            let g1 = conv::conv2d_backward(&stages[0].0, &stages[0].1, &staged.reduce, g2.dx.as_ref().expect("dx"), want_params, want_input)?;
            let params = if want_params {
                let (o, i, _) = c.factors.dims();
                let (r1, r2) = c.factors.ranks();
                let du1 = g3.dw.expect("dw").into_reshape(&[o, r1])?;
                let du2 = g1.dw.expect("dw").into_reshape(&[r2, i])?.transpose()?;
                vec![du1, du2, g2.dw.expect("dw"), Tensor::new(vec![c.bias.len()], g3.db.expect("db"))?]
            } else {
                vec![]
            };
            Ok((params, g1.dx))
        }
        (Layer::Linear(l), Cache::Linear { input }) => {
            let (b, f) = input.dims2()?;
            let out = l.weight.shape()[0];
            let params = if want_params {
                let mut dw = vec![0.0; out * f];
                gemm(out, b, f, 1.0, dy.data(), true, input.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; out];
                for row in dy.data().chunks(out) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![Tensor::new(vec![out, f], dw)?, Tensor::new(vec![out], db)?]
            } else {
                vec![]
            };
            let dx = if want_input {
                let mut dx = vec![0.0; b * f];
                gemm(b, out, f, 1.0, dy.data(), false, l.weight.data(), false, 0.0, &mut dx);
                Some(Tensor::new(vec![b, f], dx)?)
            } else {
                None
            };
            Ok((params, dx))
        }
        (Layer::ReLU, Cache::ReLU { mask }) => {
            let mut dx = dy.clone();
            for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                if !m {
                    *d = 0.0;
                }
            }
            Ok((vec![], Some(dx)))
        }
        (Layer::MaxPool { .. }, Cache::MaxPool { argmax, input_shape }) => {
            let mut dx = Tensor::zeros(input_shape);
            for (&at, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[at] += g;
            }
            Ok((vec![], Some(dx)))
        }
        (Layer::AvgPoolGlobal, Cache::AvgPool { input_shape }) => {
            let hw = input_shape[2] * input_shape[3];
            let mut dx = Tensor::zeros(input_shape);
            for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
                plane.iter_mut().for_each(|v| *v = g / hw as f64);
            }
            Ok((vec![], Some(dx)))
        }
        (Layer::BatchNorm(bn), Cache::BatchNorm { x_hat, inv_std, batch_stats, .. }) => {
            let (b, c, s) = bn_view(x_hat)?;
            let m = (b * s) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * s;
                    for (g, xh) in dy.data()[off..off + s].iter().zip(&x_hat.data()[off..off + s]) {
                        dgamma[ch] += g * xh;
                        dbeta[ch] += g;
                    }
                }
            }
            let mut dx = Tensor::zeros(x_hat.shape());
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * s;
                    let scale = bn.gamma.data()[ch] * inv_std[ch];
                    for j in off..off + s {
                        let g = dy.data()[j];
                        dx.data_mut()[j] = if batch_stats.is_some() {
                            scale * (g - dbeta[ch] / m - x_hat.data()[j] * dgamma[ch] / m)
                        } else {
                            scale * g
                        };
                    }
                }
            }
            let params = if want_params { vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?] } else { vec![] };
            Ok((params, Some(dx)))
        }
        (Layer::Flatten, Cache::Flatten { input_shape }) => Ok((vec![], Some(dy.reshape(input_shape)?))),
        _ => invalid("forward cache does not match layer"),
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, usize)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return shape_err(format!("{} labels for a batch of {}", labels.len(), b));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    let mut correct = 0;
    for (n, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return invalid(format!("label {y} outside 0..{k}"));
        }
        let p = softmax(row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        if argmax(row) == y {
            correct += 1;
        }
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (p[j] - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad, correct))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B × C × H × W`, pixels in `[0, 1]`.
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.ndim() != 4 || x.shape()[0] != y.len() {
            return shape_err(format!("batch images {:?} with {} labels", x.shape(), y.len()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub struct LossAndGrad {
    pub loss: f64,
    pub correct: usize,
    pub grads: Option<Gradients>,
    pub input_grad: Option<Tensor>,
    pub pass: ForwardPass,
}

pub fn loss_and_grad(model: &Model, batch: &Batch, mode: Mode, need: GradRequest) -> Result<LossAndGrad> {
    let pass = model.forward(&batch.x, mode)?;
    let (loss, dlogits, correct) = cross_entropy(&pass.logits, &batch.y)?;
    let (grads, input_grad) = model.backward(&pass, &dlogits, need)?;
    Ok(LossAndGrad { loss, correct, grads, input_grad, pass })
}

/// Plain SGD: `p ← p − lr · (grad + extra)`, where `extra[layer]`, when present,
/// is added to that layer's weight gradient (parameter 0).
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, extra: Option<&[Option<Tensor>]>) -> Result<()> {
    Sgd::new(0.0, 0.0).step(model, grads, lr, extra)
}

/// SGD with optional heavy-ball momentum and weight decay on weights.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Vec<Tensor>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: None }
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64, extra: Option<&[Option<Tensor>]>) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return shape_err("gradient list does not match model layers");
        }
        if let Some(ex) = extra {
            if ex.len() != model.layers.len() {
                return shape_err("extra gradient list does not match model layers");
            }
        }
        let use_velocity = self.momentum != 0.0;
        if use_velocity && self.velocity.is_none() {
            self.velocity = Some(Gradients::zeros_like(model).layers);
        }
        for (li, nl) in model.layers.iter_mut().enumerate() {
            let weight_idx = nl.layer.weight_indices();
            let params = nl.layer.params_mut();
            if params.len() != grads.layers[li].len() {
                return shape_err(format!("layer {:?}: {} gradients for {} parameters", nl.name, grads.layers[li].len(), params.len()));
            }
            for (pi, p) in params.into_iter().enumerate() {
                let g = &grads.layers[li][pi];
                if g.shape() != p.shape() {
                    return shape_err(format!("layer {:?}: gradient {:?} for parameter {:?}", nl.name, g.shape(), p.shape()));
                }
                let ex = match extra.and_then(|e| e[li].as_ref()) {
                    Some(t) if pi == 0 => {
                        if t.shape() != p.shape() {
                            return shape_err(format!("layer {:?}: extra gradient {:?} for weight {:?}", nl.name, t.shape(), p.shape()));
                        }
                        Some(t)
                    }
                    _ => None,
                };
                let wd = if weight_idx.contains(&pi) { self.weight_decay } else { 0.0 };
                let vel = if use_velocity { Some(&mut self.velocity.as_mut().expect("velocity")[li][pi]) } else { None };
                update_param(p, g, ex, wd, lr, self.momentum, vel);
            }
        }
        Ok(())
    }
}

fn update_param(p: &mut Tensor, g: &Tensor, extra: Option<&Tensor>, wd: f64, lr: f64, momentum: f64, vel: Option<&mut Tensor>) {
    let n = p.len();
    let mut step = g.data().to_vec();
    if let Some(e) = extra {
        for (s, x) in step.iter_mut().zip(e.data()) {
            *s += x;
        }
    }
    if wd != 0.0 {
        for (s, w) in step.iter_mut().zip(p.data()) {
            *s += wd * w;
        }
    }
    if let Some(v) = vel {
        for (vi, s) in v.data_mut().iter_mut().zip(step.iter_mut()) {
            *vi = momentum * *vi + *s;
            *s = *vi;
        }
    }
    let data = p.data_mut();
    for i in 0..n {
        data[i] -= lr * step[i];
    }
}

/// He-uniform (fan-in) initialisation: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn dense_conv<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, padding: usize, rng: &mut R) -> Layer {
    Layer::ConvDense(ConvDense {
        weight: he_uniform(&[cout, cin, k, k], cin * k * k, rng),
        bias: Tensor::zeros(&[cout]),
        stride: 1,
        padding,
    })
}

/// Architecture of the small CNN family used throughout: a stem convolution,
/// then blocks of conv → [batch-norm] → ReLU → 2×2 max-pool, global average
/// pooling and a linear head. Every block convolution is compressible.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniConvNetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    pub kernel: usize,
    pub batch_norm: bool,
}

impl Default for MiniConvNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 8,
            num_classes: 10,
            stem_width: 16,
            block_widths: vec![32, 64, 96, 96],
            kernel: 3,
            batch_norm: true,
        }
    }
}

impl MiniConvNetConfig {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Model> {
        if self.kernel % 2 == 0 {
            return invalid("MiniConvNet kernel size must be odd");
        }
        let pad = self.kernel / 2;
        let k = self.kernel;
        let mut layers = Vec::new();
        let mut compressible = Vec::new();
        layers.push(NamedLayer { name: "stem".into(), layer: dense_conv(self.in_channels, self.stem_width, k, pad, rng) });
        if self.batch_norm {
            layers.push(NamedLayer { name: "stem.bn".into(), layer: Layer::BatchNorm(BatchNorm::new(self.stem_width)) });
        }
        layers.push(NamedLayer { name: "stem.relu".into(), layer: Layer::ReLU });
        let mut cin = self.stem_width;
        let mut spatial = self.image_size;
        for (b, &w) in self.block_widths.iter().enumerate() {
            let name = format!("block{}.conv", b + 1);
            layers.push(NamedLayer { name: name.clone(), layer: dense_conv(cin, w, k, pad, rng) });
            compressible.push(name);
            if self.batch_norm {
                layers.push(NamedLayer { name: format!("block{}.bn", b + 1), layer: Layer::BatchNorm(BatchNorm::new(w)) });
            }
            layers.push(NamedLayer { name: format!("block{}.relu", b + 1), layer: Layer::ReLU });
            if spatial >= 2 {
                layers.push(NamedLayer { name: format!("block{}.pool", b + 1), layer: Layer::MaxPool { window: 2, stride: 2 } });
                spatial /= 2;
            }
            cin = w;
        }
        layers.push(NamedLayer { name: "gap".into(), layer: Layer::AvgPoolGlobal });
        let head = Linear {
            weight: he_uniform(&[self.num_classes, cin], cin, rng),
            bias: Tensor::zeros(&[self.num_classes]),
        };
        layers.push(NamedLayer { name: "head".into(), layer: Layer::Linear(head) });
        Model::new(layers, [self.in_channels, self.image_size, self.image_size], self.num_classes, compressible)
    }
}
