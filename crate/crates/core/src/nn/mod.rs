//! A small convolutional network with hand-written reverse-mode gradients.
//!
//! Tensors flowing through the network are NCHW (or N×F after `Flatten`),
//! stored row-major in flat buffers. Only the first layer's kernels are
//! touched by the kernel regularizers; everything else is plain
//! cross-entropy training.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{lr_at, sgd_step, SgdConfig};
pub use train::{evaluate_split, split_logits, split_scores, train, SplitEval, TrainOutcome, DIVERGENCE_LIMIT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ortho::{self, KernelBank};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    AlmostRight,
    HardOrtho,
}

/// How the cross-entropy and kernel-regularizer terms are combined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub regularizer: Regularizer,
    pub first_activation: Activation,
}

impl LossConfig {
    /// Cross-entropy only.
    pub fn cross_entropy() -> Self {
        Self {
            alpha: 1.0,
            epsilon: DEFAULT_EPSILON,
            regularizer: Regularizer::None,
            first_activation: Activation::Relu,
        }
    }

    /// Almost Right at weight `alpha`, with the sigmoid first activation.
    pub fn almost_right(alpha: f64) -> Self {
        Self {
            alpha,
            epsilon: DEFAULT_EPSILON,
            regularizer: Regularizer::AlmostRight,
            first_activation: Activation::Sigmoid,
        }
    }

    pub fn hard_ortho(alpha: f64) -> Self {
        Self {
            alpha,
            epsilon: DEFAULT_EPSILON,
            regularizer: Regularizer::HardOrtho,
            first_activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", format!("{} must be > 0", self.epsilon)));
        }
        Ok(())
    }

    /// Weight on the cross-entropy term. Without a regularizer this is 1.
    pub fn ce_weight(&self) -> f64 {
        match self.regularizer {
            Regularizer::None => 1.0,
            _ => self.alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × in × kh × kw`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Self {
        let (kernel_h, kernel_w) = kernel;
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn weight_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w],
            self.weight.clone(),
        )
        .expect("conv weight shape is consistent")
    }

    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Activation(Activation),
    MaxPool { window: usize },
    Flatten,
    Dense(Dense),
}

impl Layer {
    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| Error::Dimension(format!("{what} cannot take input shape {input:?}"));
        match self {
            Layer::Conv2d(c) => match *input {
                [ch, h, w] if ch == c.in_channels => c
                    .output_hw(h, w)
                    .map(|(oh, ow)| vec![c.out_channels, oh, ow])
                    .ok_or_else(|| mismatch("conv2d")),
                _ => Err(mismatch("conv2d")),
            },
            Layer::Activation(_) => Ok(input.to_vec()),
            Layer::MaxPool { window } => match *input {
                [ch, h, w] if *window >= 1 && h >= *window && w >= *window => {
                    Ok(vec![ch, h / window, w / window])
                }
                _ => Err(mismatch("maxpool")),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => match *input {
                [n] if n == d.inputs => Ok(vec![d.outputs]),
                _ => Err(mismatch("dense")),
            },
        }
    }
}

/// An ordered layer stack whose first layer is a convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        match layers.first() {
            Some(Layer::Conv2d(_)) => {}
            _ => return Err(Error::Input("the first layer must be a Conv2d".into())),
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                let expected = match layer {
                    Layer::Conv2d(c) => (c.out_channels * c.fan_in(), c.out_channels),
                    Layer::Dense(d) => (d.inputs * d.outputs, d.outputs),
                    _ => unreachable!(),
                };
                if (w.len(), b.len()) != expected {
                    return Err(Error::Dimension(format!("layer {i}: parameter buffers do not match its shape")));
                }
            }
            current = layer
                .output_shape(&current)
                .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
            shapes.push(current.clone());
        }
        if current.len() != 1 {
            return Err(Error::Dimension(format!("network must end in a vector, got {current:?}")));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// The desk-scale reference architecture:
    /// `Conv(16, 5×5, pad 2) → act → pool 2 → Conv(32, 3×3, pad 1) → ReLU → pool 2 → FC`.
    /// Parameters are zero until initialized.
    pub fn small_conv_net(input_shape: [usize; 3], num_classes: usize, first_activation: Activation) -> Result<Self> {
        let [c, h, w] = input_shape;
        let flat = 32 * (h / 4) * (w / 4);
        Self::new(
            input_shape,
            vec![
                Layer::Conv2d(Conv2d::new(16, c, (5, 5), 1, 2)),
                Layer::Activation(first_activation),
                Layer::MaxPool { window: 2 },
                Layer::Conv2d(Conv2d::new(32, 16, (3, 3), 1, 1)),
                Layer::Activation(Activation::Relu),
                Layer::MaxPool { window: 2 },
                Layer::Flatten,
                Layer::Dense(Dense::new(flat, num_classes)),
            ],
        )
    }

    /// Fan-in scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init_fan_in(&mut self, rng: &mut Rng) {
        for layer in &mut self.layers {
            let fan_in = match layer {
                Layer::Conv2d(c) => c.fan_in(),
                Layer::Dense(d) => d.inputs,
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let (w, b) = layer.params_mut().expect("parametric layer");
            w.iter_mut().for_each(|v| *v = std * rng.normal());
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Per-sample output shape after layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    pub fn first_conv(&self) -> &Conv2d {
        match &self.layers[0] {
            Layer::Conv2d(c) => c,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn first_conv_mut(&mut self) -> &mut Conv2d {
        match &mut self.layers[0] {
            Layer::Conv2d(c) => c,
            _ => unreachable!("validated at construction"),
        }
    }

    /// First-layer kernels as a flattened bank.
    pub fn kernel_bank(&self) -> KernelBank {
        ortho::flatten_kernels(&self.first_conv().weight_tensor()).expect("conv weights are 4-D")
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Weight and bias buffers of every parametric layer, in layer order.
    pub fn param_buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Copy with every parameter rounded to the nearest `f32`, the precision
    /// checkpoints are stored at.
    pub fn rounded_to_f32(&self) -> Network {
        let mut out = self.clone();
        for buf in out.param_buffers_mut() {
            buf.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        match batch.shape() {
            [n, rest @ ..] if rest == self.input_shape => Ok(*n),
            other => Err(Error::Dimension(format!(
                "batch shape {other:?} does not match network input N×{:?}",
                self.input_shape
            ))),
        }
    }

    /// Logits for an NCHW batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let (logits, _) = self.forward_cached(batch.data(), n, false);
        finite_tensor(vec![n, self.num_classes()], logits)
    }

    /// Output of layer `last` (inclusive) for an NCHW batch, flattened.
    pub fn activations_through(&self, batch: &Tensor, last: usize) -> Result<Vec<f64>> {
        let n = self.check_batch(batch)?;
        if last >= self.layers.len() {
            return Err(Error::Input(format!("layer {last} out of range")));
        }
        let prefix = Network {
            input_shape: self.input_shape,
            layers: self.layers[..=last].to_vec(),
            shapes: self.shapes[..=last].to_vec(),
        };
        Ok(prefix.forward_cached(batch.data(), n, false).0)
    }

    /// Forward pass; when `keep` is set, caches what backward needs.
    fn forward_cached(&self, input: &[f64], n: usize, keep: bool) -> (Vec<f64>, Vec<Cache>) {
        let mut current = input.to_vec();
        let mut in_shape: &[usize] = &self.input_shape;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (layer, out_shape) in self.layers.iter().zip(&self.shapes) {
            let (next, cache) = match layer {
                Layer::Conv2d(c) => {
                    let (out, cols) = conv_forward(c, &current, n, in_shape, out_shape);
                    (out, Cache::Conv { cols })
                }
                Layer::Activation(a) => {
                    let out: Vec<f64> = current.iter().map(|&x| activate(*a, x)).collect();
                    let cache = if keep { Cache::Activation { output: out.clone() } } else { Cache::None };
                    (out, cache)
                }
                Layer::MaxPool { window } => {
                    let (out, argmax) = maxpool_forward(*window, &current, n, in_shape, out_shape);
                    (out, Cache::Pool { argmax })
                }
                Layer::Flatten => (current, Cache::None),
                Layer::Dense(d) => {
                    let out = dense_forward(d, &current, n);
                    (out, Cache::Dense { input: current })
                }
            };
            if keep {
                caches.push(cache);
            }
            current = next;
            in_shape = out_shape;
        }
        (current, caches)
    }

    /// Reverse pass from `d_logits`; gradients of the loss w.r.t. every parameter.
    fn backward_from(&self, d_logits: Vec<f64>, caches: &[Cache], n: usize) -> Gradients {
        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        let mut delta = d_logits;
        for i in (0..self.layers.len()).rev() {
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            let out_shape = &self.shapes[i];
            let need_input_grad = i > 0;
            match (&self.layers[i], &caches[i]) {
                (Layer::Conv2d(c), Cache::Conv { cols }) => {
                    let (g, d_in) = conv_backward(c, cols, &delta, n, in_shape, out_shape, need_input_grad);
                    grads[i] = Some(g);
                    delta = d_in;
                }
                (Layer::Activation(a), Cache::Activation { output }) => {
                    for (d, &y) in delta.iter_mut().zip(output) {
                        *d *= match a {
                            Activation::Relu => (y > 0.0) as u8 as f64,
                            Activation::Sigmoid => y * (1.0 - y),
                        };
                    }
                }
                (Layer::MaxPool { .. }, Cache::Pool { argmax }) => {
                    let in_len: usize = in_shape.iter().product();
                    let out_len: usize = out_shape.iter().product();
                    let mut d_in = vec![0.0; n * in_len];
                    for s in 0..n {
                        for o in 0..out_len {
                            d_in[s * in_len + argmax[s * out_len + o]] += delta[s * out_len + o];
                        }
                    }
                    delta = d_in;
                }
                (Layer::Flatten, _) => {}
                (Layer::Dense(d), Cache::Dense { input }) => {
                    let (g, d_in) = dense_backward(d, input, &delta, n);
                    grads[i] = Some(g);
                    delta = d_in;
                }
                _ => unreachable!("cache kind matches layer kind"),
            }
        }
        Gradients { layers: grads }
    }
}

fn finite_tensor(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(shape, data).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("forward pass produced {m}")),
        other => other,
    })
}

fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

enum Cache {
    None,
    Conv { cols: Vec<f64> },
    Activation { output: Vec<f64> },
    Pool { argmax: Vec<usize> },
    Dense { input: Vec<f64> },
}

/// Gradient buffers for one parametric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients aligned with `Network::layers`; `None` for layers without parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    /// Buffers in the same order as [`Network::param_buffers`].
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn first_layer(&self) -> &ParamGrad {
        self.layers[0].as_ref().expect("first layer is a convolution")
    }
}

/// Loss terms of one backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub regularizer: f64,
}

/// Mean cross-entropy of `logits` (N×C) against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} logit rows, {} labels", labels.len())));
    }
    let (loss, _) = softmax_cross_entropy(logits.data(), labels, c)?;
    Ok(loss)
}

/// Mean CE and its gradient w.r.t. the logits.
fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - row[y];
        let g = &mut grad[s * classes..(s + 1) * classes];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (row[k] - log_norm).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Gradients of the combined objective for one batch.
///
/// Cross-entropy is weighted by `alpha` and the configured kernel regularizer
/// by `1 - alpha`; the regularizer contributes only to the first layer's
/// weights.
pub fn backward(net: &Network, batch: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(Gradients, LossParts)> {
    let n = net.check_batch(batch)?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} samples, {} labels", labels.len())));
    }
    let (logits, caches) = net.forward_cached(batch.data(), n, true);
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at index {i}")));
    }
    let (ce, mut d_logits) = softmax_cross_entropy(&logits, labels, net.num_classes())?;
    let ce_weight = cfg.ce_weight();
    d_logits.iter_mut().for_each(|g| *g *= ce_weight);
    let mut grads = net.backward_from(d_logits, &caches, n);

    let reg_weight = 1.0 - ce_weight;
    let regularizer = match cfg.regularizer {
        Regularizer::None => 0.0,
        Regularizer::AlmostRight | Regularizer::HardOrtho => {
            let bank = net.kernel_bank();
            let (value, grad) = match cfg.regularizer {
                Regularizer::AlmostRight => (
                    ortho::almost_right_loss(&bank, cfg.epsilon),
                    ortho::almost_right_grad(&bank, cfg.epsilon),
                ),
                _ => (
                    ortho::hard_ortho_loss(&bank, cfg.epsilon),
                    ortho::hard_ortho_grad(&bank, cfg.epsilon),
                ),
            };
            if reg_weight != 0.0 {
                let first = grads.layers[0].as_mut().expect("first layer is a convolution");
                first
                    .weight
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(g, r)| *g += reg_weight * r);
            }
            value
        }
    };
    let total = match cfg.regularizer {
        Regularizer::None => ce,
        _ => ortho::combined_loss(ce, regularizer, cfg.alpha)?,
    };
    Ok((
        grads,
        LossParts {
            total,
            cross_entropy: ce,
            regularizer,
        },
    ))
}

/// Total loss without gradients; the objective `backward` differentiates.
pub fn total_loss(net: &Network, batch: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    let ce = cross_entropy(&net.forward(batch)?, labels)?;
    let bank = net.kernel_bank();
    match cfg.regularizer {
        Regularizer::None => Ok(ce),
        Regularizer::AlmostRight => ortho::combined_loss(ce, ortho::almost_right_loss(&bank, cfg.epsilon), cfg.alpha),
        Regularizer::HardOrtho => ortho::combined_loss(ce, ortho::hard_ortho_loss(&bank, cfg.epsilon), cfg.alpha),
    }
}

// im2col layout: row d = (c, i, j) of the kernel, column p = output pixel.
fn im2col(c: &Conv2d, x: &[f64], in_shape: &[usize], oh: usize, ow: usize, cols: &mut [f64]) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let p_len = oh * ow;
    let pad = c.padding as isize;
    for ch in 0..c.in_channels {
        for ki in 0..c.kernel_h {
            for kj in 0..c.kernel_w {
                let d = (ch * c.kernel_h + ki) * c.kernel_w + kj;
                let row = &mut cols[d * p_len..(d + 1) * p_len];
                for oy in 0..oh {
                    let y = (oy * c.stride + ki) as isize - pad;
                    for ox in 0..ow {
                        let xx = (ox * c.stride + kj) as isize - pad;
                        row[oy * ow + ox] = if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                            x[(ch * h + y as usize) * w + xx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(c: &Conv2d, cols: &[f64], in_shape: &[usize], oh: usize, ow: usize, dx: &mut [f64]) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let p_len = oh * ow;
    let pad = c.padding as isize;
    for ch in 0..c.in_channels {
        for ki in 0..c.kernel_h {
            for kj in 0..c.kernel_w {
                let d = (ch * c.kernel_h + ki) * c.kernel_w + kj;
                let row = &cols[d * p_len..(d + 1) * p_len];
                for oy in 0..oh {
                    let y = (oy * c.stride + ki) as isize - pad;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * c.stride + kj) as isize - pad;
                        if xx >= 0 && (xx as usize) < w {
                            dx[(ch * h + y as usize) * w + xx as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(c: &Conv2d, input: &[f64], n: usize, in_shape: &[usize], out_shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let p_len = oh * ow;
    let d_len = c.fan_in();
    let in_len: usize = in_shape.iter().product();
    let out_len = c.out_channels * p_len;
    let mut cols = vec![0.0; n * d_len * p_len];
    let mut out = vec![0.0; n * out_len];
    for s in 0..n {
        let cols_s = &mut cols[s * d_len * p_len..(s + 1) * d_len * p_len];
        im2col(c, &input[s * in_len..(s + 1) * in_len], in_shape, oh, ow, cols_s);
        let out_s = &mut out[s * out_len..(s + 1) * out_len];
        for k in 0..c.out_channels {
            let o = &mut out_s[k * p_len..(k + 1) * p_len];
            o.fill(c.bias[k]);
            for d in 0..d_len {
                let wv = c.weight[k * d_len + d];
                let col = &cols_s[d * p_len..(d + 1) * p_len];
                o.iter_mut().zip(col).for_each(|(acc, x)| *acc += wv * x);
            }
        }
    }
    (out, cols)
}

fn conv_backward(
    c: &Conv2d,
    cols: &[f64],
    delta: &[f64],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    need_input_grad: bool,
) -> (ParamGrad, Vec<f64>) {
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let p_len = oh * ow;
    let d_len = c.fan_in();
    let in_len: usize = in_shape.iter().product();
    let out_len = c.out_channels * p_len;
    let mut dw = vec![0.0; c.weight.len()];
    let mut db = vec![0.0; c.out_channels];
    let mut d_in = if need_input_grad { vec![0.0; n * in_len] } else { Vec::new() };
    let mut d_cols = vec![0.0; if need_input_grad { d_len * p_len } else { 0 }];
    for s in 0..n {
        let cols_s = &cols[s * d_len * p_len..(s + 1) * d_len * p_len];
        let delta_s = &delta[s * out_len..(s + 1) * out_len];
        for k in 0..c.out_channels {
            let dk = &delta_s[k * p_len..(k + 1) * p_len];
            db[k] += dk.iter().sum::<f64>();
            for d in 0..d_len {
                let col = &cols_s[d * p_len..(d + 1) * p_len];
                dw[k * d_len + d] += dk.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if need_input_grad {
            d_cols.fill(0.0);
            for k in 0..c.out_channels {
                let dk = &delta_s[k * p_len..(k + 1) * p_len];
                for d in 0..d_len {
                    let wv = c.weight[k * d_len + d];
                    let row = &mut d_cols[d * p_len..(d + 1) * p_len];
                    row.iter_mut().zip(dk).for_each(|(acc, g)| *acc += wv * g);
                }
            }
            col2im(c, &d_cols, in_shape, oh, ow, &mut d_in[s * in_len..(s + 1) * in_len]);
        }
    }
    (ParamGrad { weight: dw, bias: db }, d_in)
}

fn maxpool_forward(window: usize, input: &[f64], n: usize, in_shape: &[usize], out_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let in_len = ch * h * w;
    let out_len = ch * oh * ow;
    let mut out = vec![0.0; n * out_len];
    let mut argmax = vec![0usize; n * out_len];
    for s in 0..n {
        let x = &input[s * in_len..(s + 1) * in_len];
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    // First maximum in scan order wins ties.
                    let mut best_idx = (c * h + oy * window) * w + ox * window;
                    let mut best = x[best_idx];
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (c * h + oy * window + dy) * w + ox * window + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = s * out_len + (c * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

fn dense_forward(d: &Dense, input: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d.outputs);
    for s in 0..n {
        let x = &input[s * d.inputs..(s + 1) * d.inputs];
        for o in 0..d.outputs {
            let row = &d.weight[o * d.inputs..(o + 1) * d.inputs];
            out.push(d.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    out
}

fn dense_backward(d: &Dense, input: &[f64], delta: &[f64], n: usize) -> (ParamGrad, Vec<f64>) {
    let mut dw = vec![0.0; d.weight.len()];
    let mut db = vec![0.0; d.outputs];
    let mut d_in = vec![0.0; n * d.inputs];
    for s in 0..n {
        let x = &input[s * d.inputs..(s + 1) * d.inputs];
        let dx = &mut d_in[s * d.inputs..(s + 1) * d.inputs];
        for o in 0..d.outputs {
            let g = delta[s * d.outputs + o];
            db[o] += g;
            let w_row = &d.weight[o * d.inputs..(o + 1) * d.inputs];
            let dw_row = &mut dw[o * d.inputs..(o + 1) * d.inputs];
            for i in 0..d.inputs {
                dw_row[i] += g * x[i];
                dx[i] += g * w_row[i];
            }
        }
    }
    (ParamGrad { weight: dw, bias: db }, d_in)
}

#[cfg(test)]
mod tests;
