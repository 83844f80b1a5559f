//! Layer primitives with explicit backward passes.
//!
//! Activations are batched and row-major: `[N, C, H, W]` for feature maps
//! and `[N, F]` for dense features. The `*_raw` functions operate on flat
//! slices and are what the network uses; the `Tensor` wrappers check
//! shapes and serve tests and tooling.

use matrixmultiply::dgemm;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::seed::splitmix64;
use crate::{Error, Result};

/// Side length of every convolution kernel.
pub const KERNEL: usize = 3;
const KK: usize = KERNEL * KERNEL;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above state the extent of every operand;
    // all callers derive strides from the slice dimensions they pass.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let (oh, ow) = (h - 2, w - 2);
    let s = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..KERNEL {
            for v in 0..KERNEL {
                let r = ci * KK + u * KERNEL + v;
                let dst = &mut cols[r * s..(r + 1) * s];
                for i in 0..oh {
                    let src = &plane[(i + u) * w + v..(i + u) * w + v + ow];
                    dst[i * ow..(i + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h - 2, w - 2);
    let s = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for u in 0..KERNEL {
            for v in 0..KERNEL {
                let r = ci * KK + u * KERNEL + v;
                let src = &cols[r * s..(r + 1) * s];
                for i in 0..oh {
                    let dst = &mut plane[(i + u) * w + v..(i + u) * w + v + ow];
                    for (d, s) in dst.iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Geometry of a batched 3x3 valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height - 2
    }
    pub fn out_width(&self) -> usize {
        self.width - 2
    }
    fn in_plane(&self) -> usize {
        self.in_channels * self.height * self.width
    }
    fn out_spatial(&self) -> usize {
        self.out_height() * self.out_width()
    }
    pub fn output_len(&self) -> usize {
        self.batch * self.filters * self.out_spatial()
    }
}

/// Valid 3x3 cross-correlation, unit stride.
pub fn conv2d_forward_raw(
    g: ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let ck = g.in_channels * KK;
    let s = g.out_spatial();
    let mut cols = vec![0.0; ck * s];
    for n in 0..g.batch {
        im2col(
            &input[n * g.in_plane()..(n + 1) * g.in_plane()],
            g.in_channels,
            g.height,
            g.width,
            &mut cols,
        );
        let out_n = &mut out[n * g.filters * s..(n + 1) * g.filters * s];
        let beta = match bias {
            Some(b) => {
                for (k, bk) in b.iter().enumerate() {
                    out_n[k * s..(k + 1) * s].fill(*bk);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(g.filters, ck, s, kernels, (ck, 1), &cols, (s, 1), beta, out_n, (s, 1));
    }
}

/// Accumulates kernel (and optionally bias and input) gradients.
pub fn conv2d_backward_raw(
    g: ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    dout: &[f64],
    dkernels: &mut [f64],
    mut dbias: Option<&mut [f64]>,
    mut dinput: Option<&mut [f64]>,
) {
    let ck = g.in_channels * KK;
    let s = g.out_spatial();
    let mut cols = vec![0.0; ck * s];
    let mut dcols = if dinput.is_some() { vec![0.0; ck * s] } else { Vec::new() };
    for n in 0..g.batch {
        let x_n = &input[n * g.in_plane()..(n + 1) * g.in_plane()];
        let dout_n = &dout[n * g.filters * s..(n + 1) * g.filters * s];
        im2col(x_n, g.in_channels, g.height, g.width, &mut cols);
        gemm(g.filters, s, ck, dout_n, (s, 1), &cols, (1, s), 1.0, dkernels, (ck, 1));
        if let Some(db) = dbias.as_deref_mut() {
            for (k, d) in db.iter_mut().enumerate() {
                *d += dout_n[k * s..(k + 1) * s].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dinput.as_deref_mut() {
            gemm(ck, g.filters, s, kernels, (1, ck), dout_n, (s, 1), 0.0, &mut dcols, (s, 1));
            col2im_add(
                &dcols,
                g.in_channels,
                g.height,
                g.width,
                &mut dx[n * g.in_plane()..(n + 1) * g.in_plane()],
            );
        }
    }
}

fn as_batched(t: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        ref s => Err(Error::ShapeMismatch(format!(
            "expected C×H×W or N×C×H×W, got {s:?}"
        ))),
    }
}

fn conv_geometry(input: &Tensor, kernels: &Tensor) -> Result<(ConvGeometry, bool)> {
    let (n, c, h, w, batched) = as_batched(input)?;
    let [k, kc, kh, kw] = *kernels.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "kernels must be K×C×3×3, got {:?}",
            kernels.shape()
        )));
    };
    if kc != c || kh != KERNEL || kw != KERNEL {
        return Err(Error::ShapeMismatch(format!(
            "kernels {:?} do not match input {:?}",
            kernels.shape(),
            input.shape()
        )));
    }
    if h < KERNEL || w < KERNEL {
        return Err(Error::ShapeMismatch(format!(
            "input {h}×{w} smaller than the 3×3 kernel"
        )));
    }
    let g = ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: w,
        filters: k,
    };
    Ok((g, batched))
}

/// `out[k][i][j] = bias[k] + Σ_c Σ_{u,v} input[c][i+u][j+v] · kernels[k][c][u][v]`.
///
/// Accepts `C×H×W` or `N×C×H×W` input and returns the same rank.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let (g, batched) = conv_geometry(input, kernels)?;
    if let Some(b) = bias {
        if b.len() != g.filters {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for {} filters",
                b.len(),
                g.filters
            )));
        }
    }
    let mut out = vec![0.0; g.output_len()];
    conv2d_forward_raw(g, input.data(), kernels.data(), bias, &mut out);
    let shape = if batched {
        vec![g.batch, g.filters, g.out_height(), g.out_width()]
    } else {
        vec![g.filters, g.out_height(), g.out_width()]
    };
    Tensor::new(shape, out)
}

/// Gradients of a convolution given the upstream gradient.
pub struct ConvGrads {
    pub kernels: Tensor,
    pub bias: Vec<f64>,
    pub input: Tensor,
}

pub fn conv2d_backward(input: &Tensor, kernels: &Tensor, dout: &Tensor) -> Result<ConvGrads> {
    let (g, _) = conv_geometry(input, kernels)?;
    if dout.len() != g.output_len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} does not match conv output",
            dout.shape()
        )));
    }
    let mut dk = Tensor::zeros(kernels.shape());
    let mut db = vec![0.0; g.filters];
    let mut dx = Tensor::zeros(input.shape());
    conv2d_backward_raw(
        g,
        input.data(),
        kernels.data(),
        dout.data(),
        dk.data_mut(),
        Some(&mut db),
        Some(dx.data_mut()),
    );
    Ok(ConvGrads {
        kernels: dk,
        bias: db,
        input: dx,
    })
}

/// 2×2 max pooling over `planes` independent H×W planes. Odd trailing
/// rows and columns are dropped. `argmax` receives flat input indices.
pub fn maxpool_raw(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        let obase = p * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out[obase + i * ow + j] = input[best];
                argmax[obase + i * ow + j] = best as u32;
            }
        }
    }
}

pub fn maxpool_backward_raw(dout: &[f64], argmax: &[u32], dinput: &mut [f64]) {
    for (d, &idx) in dout.iter().zip(argmax) {
        dinput[idx as usize] += d;
    }
}

/// Returns the pooled tensor and the flat source index of each output cell.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w, batched) = as_batched(input)?;
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!("cannot pool a {h}×{w} plane")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0u32; out.len()];
    maxpool_raw(input.data(), n * c, h, w, &mut out, &mut arg);
    let shape = if batched {
        vec![n, c, oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Ok((
        Tensor::new(shape, out)?,
        arg.into_iter().map(|a| a as usize).collect(),
    ))
}

/// Learned affine parameters and running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(features: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            epsilon,
        }
    }
}

/// Values cached by a train-mode batchnorm pass for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Train-mode normalization of `x` laid out as `[n, c, s]`, in place.
/// Statistics are taken per channel over the batch and spatial positions.
pub fn batchnorm_train_raw(
    x: &mut [f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    epsilon: f64,
) -> BatchNormCache {
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let row = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            mean[ch] += row.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            let row = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            var[ch] += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (xv, xh) in x[range.clone()].iter_mut().zip(&mut xhat[range]) {
                *xh = (*xv - m) * is;
                *xv = g * *xh + bt;
            }
        }
    }
    BatchNormCache {
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    }
}

/// Infer-mode normalization with running statistics, in place.
pub fn batchnorm_infer_raw(x: &mut [f64], n: usize, c: usize, s: usize, p: &BatchNormParams) {
    for ch in 0..c {
        let scale = p.gamma[ch] / (p.running_var[ch] + p.epsilon).sqrt();
        let shift = p.beta[ch] - p.running_mean[ch] * scale;
        for b in 0..n {
            for v in &mut x[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *v = *v * scale + shift;
            }
        }
    }
}

/// Converts `dy` into `dx` in place and accumulates `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_raw(
    dy: &mut [f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    cache: &BatchNormCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let count = (n * s) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            for (d, xh) in dy[range.clone()].iter().zip(&cache.xhat[range]) {
                sum_dy[ch] += d;
                sum_dy_xhat[ch] += d * xh;
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let k = gamma[ch] * cache.inv_std[ch] / count;
            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
            for (d, xh) in dy[range.clone()].iter_mut().zip(&cache.xhat[range]) {
                *d = k * (count * *d - sd - xh * sdx);
            }
        }
    }
}

fn bn_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, f] => Ok((*n, *f, 1)),
        [n, c, rest @ ..] if !rest.is_empty() => Ok((*n, *c, rest.iter().product())),
        s => Err(Error::ShapeMismatch(format!(
            "batchnorm expects N×F or N×C×H×W, got {s:?}"
        ))),
    }
}

/// Batch normalization. Train mode uses batch statistics and updates the
/// running statistics; infer mode uses the running statistics only.
pub fn batchnorm_forward(x: &Tensor, params: &mut BatchNormParams, mode: Mode) -> Result<Tensor> {
    let (n, c, s) = bn_layout(x)?;
    if params.gamma.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm has {} features, input has {c}",
            params.gamma.len()
        )));
    }
    let mut out = x.clone();
    match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            let cache = batchnorm_train_raw(
                out.data_mut(),
                n,
                c,
                s,
                &params.gamma,
                &params.beta,
                params.epsilon,
            );
            update_running(params, &cache);
        }
        Mode::Infer => batchnorm_infer_raw(out.data_mut(), n, c, s, params),
    }
    Ok(out)
}

/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn update_running(params: &mut BatchNormParams, cache: &BatchNormCache) {
    let m = params.momentum;
    for (r, b) in params.running_mean.iter_mut().zip(&cache.batch_mean) {
        *r = m * *r + (1.0 - m) * b;
    }
    for (r, b) in params.running_var.iter_mut().zip(&cache.batch_var) {
        *r = m * *r + (1.0 - m) * b;
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Inverted dropout: kept elements are scaled by `1 / keep_prob`.
/// Returns the output and the keep mask.
pub fn dropout(x: &Tensor, keep_prob: f64, mode: Mode, seed: u64) -> (Tensor, Vec<bool>) {
    if mode == Mode::Infer || keep_prob >= 1.0 {
        return (x.clone(), vec![true; x.len()]);
    }
    let scale = 1.0 / keep_prob;
    let mut out = x.clone();
    let mask: Vec<bool> = keep_draws(x.len(), keep_prob, seed).collect();
    for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
        *v = if keep { *v * scale } else { 0.0 };
    }
    (out, mask)
}

/// `n` seeded Bernoulli(keep_prob) draws. Draw `i` compares 32 bits of a
/// counter-based hash of `(seed, i / 2)` against `keep_prob · 2³²`, so
/// masks do not depend on traversal order.
fn keep_draws(n: usize, keep_prob: f64, seed: u64) -> impl Iterator<Item = bool> {
    let threshold = (keep_prob * 4_294_967_296.0) as u64;
    let stream = splitmix64(seed);
    (0..n).map(move |i| {
        let bits = splitmix64(stream.wrapping_add((i / 2) as u64));
        (bits >> (32 * (i % 2))) & 0xFFFF_FFFF < threshold
    })
}

/// Fused ReLU and inverted dropout, in place, with the draws of
/// [`dropout`]. The returned mask marks elements that pass both; their
/// gradient factor is `1 / keep_prob`.
pub fn relu_dropout_raw(x: &mut [f64], keep_prob: f64, seed: u64) -> Vec<bool> {
    if keep_prob >= 1.0 {
        return x
            .iter_mut()
            .map(|v| {
                let pass = *v > 0.0;
                if !pass {
                    *v = 0.0;
                }
                pass
            })
            .collect();
    }
    let scale = 1.0 / keep_prob;
    let n = x.len();
    x.iter_mut()
        .zip(keep_draws(n, keep_prob, seed))
        .map(|(v, keep)| {
            let pass = keep && *v > 0.0;
            *v = if pass { *v * scale } else { 0.0 };
            pass
        })
        .collect()
}

pub fn relu_dropout_backward_raw(dx: &mut [f64], mask: &[bool], keep_prob: f64) {
    let scale = if keep_prob >= 1.0 { 1.0 } else { 1.0 / keep_prob };
    for (d, &pass) in dx.iter_mut().zip(mask) {
        *d = if pass { *d * scale } else { 0.0 };
    }
}

/// `out = x·W + b` for `x` of shape `[n, d]` and `W` of shape `[d, m]`.
pub fn dense_forward_raw(
    x: &[f64],
    n: usize,
    d: usize,
    weights: &[f64],
    m: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let beta = match bias {
        Some(b) => {
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(b);
            }
            1.0
        }
        None => 0.0,
    };
    gemm(n, d, m, x, (d, 1), weights, (m, 1), beta, out, (m, 1));
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and overwrites `dx = dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward_raw(
    x: &[f64],
    n: usize,
    d: usize,
    weights: &[f64],
    m: usize,
    dy: &[f64],
    dweights: &mut [f64],
    dbias: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    gemm(d, n, m, x, (1, d), dy, (m, 1), 1.0, dweights, (m, 1));
    if let Some(db) = dbias {
        for row in dy.chunks_exact(m) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(n, m, d, dy, (m, 1), weights, (1, m), 0.0, dx, (d, 1));
    }
}

pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (&[n, d], &[wd, m]) = (x.shape(), weights.shape()) else {
        return Err(Error::ShapeMismatch(format!(
            "dense expects N×D input and D×M weights, got {:?} and {:?}",
            x.shape(),
            weights.shape()
        )));
    };
    if wd != d || bias.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "input {:?}, weights {:?}, bias {}",
            x.shape(),
            weights.shape(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; n * m];
    dense_forward_raw(x.data(), n, d, weights.data(), m, Some(bias), &mut out);
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_raw(logits: &[f64], classes: usize, out: &mut [f64]) {
    for (row, o) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &l) in o.iter_mut().zip(row) {
            *oi = (l - max).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let &[_, k] = logits.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "softmax expects N×K logits, got {:?}",
            logits.shape()
        )));
    };
    let mut out = vec![0.0; logits.len()];
    softmax_raw(logits.data(), k, &mut out);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over the batch of `−ln p[label]`.
pub fn cross_entropy(probs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let total: f64 = probs
        .chunks_exact(classes)
        .zip(labels)
        .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let out = conv2d_forward(&t(&[1, 3, 3], &[1.0; 9]), &t(&[1, 1, 3, 3], &[1.0; 9]), Some(&[0.0]))
            .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out[0], 9.0);

        let zero = Tensor::zeros(&[2, 6, 5]);
        let k = Tensor::filled(&[3, 2, 3, 3], 0.7);
        let out = conv2d_forward(&zero, &k, Some(&[1.5, -2.0, 0.25])).unwrap();
        assert_eq!(out.shape(), &[3, 4, 3]);
        for kk in 0..3 {
            let b = [1.5, -2.0, 0.25][kk];
            assert!(out.data()[kk * 12..(kk + 1) * 12].iter().all(|&v| v == b));
        }

        let x = Tensor::filled(&[1, 37, 37], 0.1);
        let k = Tensor::filled(&[8, 1, 3, 3], 0.1);
        assert_eq!(conv2d_forward(&x, &k, None).unwrap().shape(), &[8, 35, 35]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[2, 5, 5]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), None).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[1, 2, 5]), &Tensor::zeros(&[1, 1, 3, 3]), None).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn pool_examples() {
        let (out, arg) = maxpool2x2(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let (out, arg) = maxpool2x2(&t(&[1, 2, 2], &[5.0, 5.0, 1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(arg, vec![0]);

        let (out, _) = maxpool2x2(&Tensor::zeros(&[8, 35, 35])).unwrap();
        assert_eq!(out.shape(), &[8, 17, 17]);

        assert!(maxpool2x2(&Tensor::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn pool_drops_odd_edge() {
        // 3x3 plane: last row/col ignored, even if it holds the max.
        let (out, arg) =
            maxpool2x2(&t(&[1, 3, 3], &[1.0, 2.0, 99.0, 3.0, 0.0, 99.0, 99.0, 99.0, 99.0])).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn batchnorm_examples() {
        let mut p = BatchNormParams::new(1, 0.9, 1e-5);
        let y = batchnorm_forward(&t(&[2, 1], &[1.0, 3.0]), &mut p, Mode::Train).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
        assert!((p.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((p.running_var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);

        let mut p = BatchNormParams::new(1, 0.9, 1e-12);
        p.gamma[0] = 2.0;
        p.beta[0] = 5.0;
        let x = [-1.0, 1.0, -1.0, 1.0];
        let y = batchnorm_forward(&t(&[4, 1], &x), &mut p, Mode::Train).unwrap();
        for (yi, xi) in y.data().iter().zip(x) {
            assert!((yi - (2.0 * xi + 5.0)).abs() < 1e-9);
        }

        let mut p = BatchNormParams::new(2, 0.9, 1e-5);
        let x = t(&[1, 2], &[0.3, -4.0]);
        let y = batchnorm_forward(&x, &mut p, Mode::Infer).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let mut p = BatchNormParams::new(1, 0.9, 1e-5);
        assert!(matches!(
            batchnorm_forward(&t(&[1, 1], &[1.0]), &mut p, Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn relu_and_dropout_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let x = t(&[4], &[1.0, -2.0, 3.0, 4.5]);
        assert_eq!(dropout(&x, 0.6, Mode::Infer, 1).0, x);
        assert_eq!(dropout(&x, 1.0, Mode::Train, 1).0, x);
        let (y, mask) = dropout(&x, 0.5, Mode::Train, 9);
        for ((yi, xi), m) in y.data().iter().zip(x.data()).zip(mask) {
            assert_eq!(*yi, if m { xi * 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn dense_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense_forward(&x, &id, &[0.0, 0.0]).unwrap(), x);

        let out = dense_forward(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[1.0, 1.0]), &[0.5]).unwrap();
        assert_eq!(out.data(), &[3.5]);

        let out = dense_forward(&x, &Tensor::zeros(&[2, 3]), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        assert!(dense_forward(&x, &Tensor::zeros(&[3, 3]), &[0.0; 3]).is_err());
    }

    #[test]
    fn softmax_and_loss_examples() {
        let p = softmax(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&t(&[1, 2], &[2f64.ln(), 0.0])).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(cross_entropy(&[1.0, 0.0], 2, &[0]) <= 1e-12);
        assert!(cross_entropy(&[1.0, 0.0], 2, &[1]).is_finite());
        let l = cross_entropy(&[0.5, 0.5, 0.25, 0.75], 2, &[0, 1]);
        assert!((l - (2f64.ln() + (4.0f64 / 3.0).ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let p = softmax(&t(&[2, 2], &[1000.0, -1000.0, -745.0, 745.0])).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert_eq!(p[0], 1.0);
    }
}
