//! Kernel-geometry regularizers on the first convolutional layer, and the
//! LSUV orthonormal initialization baseline.
//!
//! The soft regularizer is the mean signed cosine over all unordered pairs
//! of flattened kernels,
//!
//! ```text
//! L_AR = 2 / (K (K - 1)) · Σ_{i<j} A_i·A_j / (‖A_i‖ ‖A_j‖ + ε)
//! ```
//!
//! combined with cross-entropy as `α·CE + (1 - α)·L_AR`. Because each term is
//! a pairwise cosine, the optimizer is free to leave some pairs far from 90°
//! while pushing others towards it; no subset of pairs is chosen explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::tensor::{self, gram_schmidt_rows, Rng, Tensor};

/// First-layer kernels flattened to rows of length `C·h·w`
/// (channel-major, then row-major over the spatial window).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    rows: Tensor,
}

impl KernelBank {
    pub fn from_rows(rows: Tensor) -> Result<Self> {
        rows.dims2()?;
        Ok(Self { rows })
    }

    pub fn k(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.k()).map(|i| tensor::l2_norm(self.row(i))).collect()
    }

    /// Inverse of [`flatten_kernels`].
    pub fn to_conv_weights(&self, channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Tensor> {
        if channels * kernel_h * kernel_w != self.d() {
            return Err(Error::Dimension(format!(
                "{channels}×{kernel_h}×{kernel_w} does not match flattened length {}",
                self.d()
            )));
        }
        self.rows.clone().reshape(vec![self.k(), channels, kernel_h, kernel_w])
    }
}

/// Flattens a `K×C×h×w` weight tensor into a `K×(C·h·w)` bank.
pub fn flatten_kernels(conv_weights: &Tensor) -> Result<KernelBank> {
    match *conv_weights.shape() {
        [k, c, h, w] => Ok(KernelBank {
            rows: conv_weights.clone().reshape(vec![k, c * h * w])?,
        }),
        ref other => Err(Error::Dimension(format!("expected K×C×h×w weights, got {other:?}"))),
    }
}

/// ε-guarded cosines for every pair `i < j`, in row-major pair order.
pub(crate) fn pair_cosines(kb: &KernelBank, epsilon: f64) -> Vec<f64> {
    let norms = kb.norms();
    let k = kb.k();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            out.push(tensor::dot_unchecked(kb.row(i), kb.row(j)) / (norms[i] * norms[j] + epsilon));
        }
    }
    out
}

/// Sum in sorted order, so that permuting the bank rows (which permutes
/// bitwise-identical cosines) cannot change the result.
fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Mean signed pairwise cosine of the bank; 0 when `K < 2`.
pub fn almost_right_loss(kb: &KernelBank, epsilon: f64) -> f64 {
    let k = kb.k();
    if k < 2 {
        return 0.0;
    }
    let scale = 2.0 / (k * (k - 1)) as f64;
    scale * order_free_sum(pair_cosines(kb, epsilon))
}

/// Adds `scale · ∂c_ij/∂A_i` to `grad_i`, where `c_ij` is the guarded cosine.
fn add_cosine_grad(grad_i: &mut [f64], a_i: &[f64], a_j: &[f64], n_i: f64, n_j: f64, dot: f64, epsilon: f64, scale: f64) {
    let denom = n_i * n_j + epsilon;
    let along_j = scale / denom;
    // Zero rows have a zero numerator; their radial term vanishes.
    let along_i = if n_i > 0.0 { scale * dot * n_j / (n_i * denom * denom) } else { 0.0 };
    for ((g, &x_i), &x_j) in grad_i.iter_mut().zip(a_i).zip(a_j) {
        *g += along_j * x_j - along_i * x_i;
    }
}

/// Analytic gradient of [`almost_right_loss`] w.r.t. every bank row (K×D).
pub fn almost_right_grad(kb: &KernelBank, epsilon: f64) -> Tensor {
    let (k, d) = (kb.k(), kb.d());
    let mut grad = vec![0.0; k * d];
    if k < 2 {
        return Tensor::zeros(vec![k, d]);
    }
    let scale = 2.0 / (k * (k - 1)) as f64;
    let norms = kb.norms();
    for i in 0..k {
        for j in i + 1..k {
            let dot = tensor::dot_unchecked(kb.row(i), kb.row(j));
            add_cosine_grad(&mut grad[i * d..(i + 1) * d], kb.row(i), kb.row(j), norms[i], norms[j], dot, epsilon, scale);
            add_cosine_grad(&mut grad[j * d..(j + 1) * d], kb.row(j), kb.row(i), norms[j], norms[i], dot, epsilon, scale);
        }
    }
    Tensor::new(vec![k, d], grad).expect("finite gradient")
}

/// `α·ce + (1 - α)·reg`.
pub fn combined_loss(ce: f64, reg: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} is outside [0, 1]")));
    }
    Ok(alpha * ce + (1.0 - alpha) * reg)
}

/// Squared Frobenius deviation of the row-normalized Gram matrix from the
/// identity, `Σ_{i≠j} c_ij²` with the same ε-guarded cosines as the soft loss.
///
/// Zero rows have zero cosines with everything and so count as orthogonal.
pub fn hard_ortho_loss(kb: &KernelBank, epsilon: f64) -> f64 {
    2.0 * order_free_sum(pair_cosines(kb, epsilon).iter().map(|c| c * c).collect())
}

/// Analytic gradient of [`hard_ortho_loss`] (K×D).
pub fn hard_ortho_grad(kb: &KernelBank, epsilon: f64) -> Tensor {
    let (k, d) = (kb.k(), kb.d());
    let mut grad = vec![0.0; k * d];
    let norms = kb.norms();
    for i in 0..k {
        for j in i + 1..k {
            let dot = tensor::dot_unchecked(kb.row(i), kb.row(j));
            let c = dot / (norms[i] * norms[j] + epsilon);
            // d(2 c²)/dc = 4c
            add_cosine_grad(&mut grad[i * d..(i + 1) * d], kb.row(i), kb.row(j), norms[i], norms[j], dot, epsilon, 4.0 * c);
            add_cosine_grad(&mut grad[j * d..(j + 1) * d], kb.row(j), kb.row(i), norms[j], norms[i], dot, epsilon, 4.0 * c);
        }
    }
    Tensor::new(vec![k, d], grad).expect("finite gradient")
}

pub const LSUV_TOL_VAR: f64 = 0.01;
pub const LSUV_MAX_ITERS: usize = 10;
const LSUV_MIN_VARIANCE: f64 = 1e-12;
const LSUV_REDRAWS: usize = 3;

/// Outcome of LSUV for one parametric layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsuvLayer {
    pub layer: usize,
    /// Max |QQᵀ - I| (or |QᵀQ - I| for tall matrices) of the orthonormal draw.
    pub orthonormality_error: f64,
    pub iterations: usize,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsuvReport {
    pub tol_var: f64,
    pub max_iters: usize,
    pub layers: Vec<LsuvLayer>,
}

/// Layer-sequential unit-variance initialization.
///
/// Each convolution / dense layer, in order, gets an orthonormalized Gaussian
/// draw and zero bias, then its weights are divided by `sqrt(var(output))`
/// on the probe batch until the output variance is within `tol_var` of 1 or
/// `max_iters` rescalings have been applied.
pub fn lsuv_init(net: &mut Network, probe: &Tensor, tol_var: f64, max_iters: usize, rng: &mut Rng) -> Result<LsuvReport> {
    if probe.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Input("empty probe batch".into()));
    }
    let parametric: Vec<usize> = (0..net.layers().len()).filter(|&i| net.layers()[i].is_parametric()).collect();
    let mut layers = Vec::with_capacity(parametric.len());
    for li in parametric {
        let (rows, cols) = match &net.layers()[li] {
            Layer::Conv2d(c) => (c.out_channels, c.fan_in()),
            Layer::Dense(d) => (d.outputs, d.inputs),
            _ => unreachable!(),
        };
        let (weights, orthonormality_error) = orthonormal_draw(rows, cols, rng)?;
        set_layer_params(net, li, weights, 0.0);

        let mut iterations = 0;
        let mut variance = output_variance(net, probe, li)?;
        while (variance - 1.0).abs() > tol_var && iterations < max_iters {
            if variance < LSUV_MIN_VARIANCE {
                return Err(Error::Degenerate(format!("layer {li} output variance {variance:e} underflowed")));
            }
            let s = 1.0 / variance.sqrt();
            scale_layer_weights(net, li, s);
            iterations += 1;
            variance = output_variance(net, probe, li)?;
        }
        layers.push(LsuvLayer {
            layer: li,
            orthonormality_error,
            iterations,
            variance,
        });
    }
    Ok(LsuvReport {
        tol_var,
        max_iters,
        layers,
    })
}

/// Population variance of layer `li`'s output over the whole probe batch.
pub fn output_variance(net: &Network, probe: &Tensor, li: usize) -> Result<f64> {
    let out = net.activations_through(probe, li)?;
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    Ok(out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

fn orthonormal_draw(rows: usize, cols: usize, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
    let mut last_err = None;
    for _ in 0..=LSUV_REDRAWS {
        let g = tensor::gaussian(rng, vec![rows, cols], 0.0, 1.0)?;
        let q = if rows <= cols {
            gram_schmidt_rows(&g)
        } else {
            gram_schmidt_rows(&g.transpose()?).and_then(|t| t.transpose())
        };
        match q {
            Ok(q) => {
                let err = orthonormality_error(&q)?;
                return Ok((q.into_data(), err));
            }
            Err(e @ Error::Degenerate(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one draw"))
}

/// Max deviation from the identity of `QQᵀ` (wide) or `QᵀQ` (tall).
pub fn orthonormality_error(q: &Tensor) -> Result<f64> {
    let (r, c) = q.dims2()?;
    let gram = if r <= c {
        q.matmul_transposed(q)?
    } else {
        let t = q.transpose()?;
        t.matmul_transposed(&t)?
    };
    let k = gram.shape()[0];
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.at2(i, j) - target).abs());
        }
    }
    Ok(worst)
}

fn set_layer_params(net: &mut Network, li: usize, weights: Vec<f64>, bias: f64) {
    match &mut net.layers_mut()[li] {
        Layer::Conv2d(c) => {
            c.weight = weights;
            c.bias.fill(bias);
        }
        Layer::Dense(d) => {
            d.weight = weights;
            d.bias.fill(bias);
        }
        _ => unreachable!(),
    }
}

fn scale_layer_weights(net: &mut Network, li: usize, s: f64) {
    let w = match &mut net.layers_mut()[li] {
        Layer::Conv2d(c) => &mut c.weight,
        Layer::Dense(d) => &mut d.weight,
        _ => unreachable!(),
    };
    w.iter_mut().for_each(|v| *v *= s);
}
