//! CNN layers recorded on the tape: convolution, pooling, batch
//! normalization, affine maps and the classification loss. Spatial layers
//! accept `[c, h, w]` or batched `[n, c, h, w]` inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Function, Tape, Var, VjpContext};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt, transpose, Scalar, Tensor};

/// Weights of one convolution. `weight` is `[out_c, in_c, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    /// Kaiming-uniform (fan-in) weights, zero bias.
    pub fn kaiming(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        ConvParams {
            weight: kaiming_uniform(&[out_c, in_c, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }
}

/// Uniform on `±sqrt(6 / fan_in)`, the He initialization for ReLU networks.
pub fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..bound)))
}

/// Activation of one model layer for a single image.
#[derive(Debug, Clone)]
pub struct LayerActivation<S: Scalar = f32> {
    pub layer: usize,
    pub value: Tensor<S>,
}

/// Normalizes a spatial shape to `(n, c, h, w, batched)`.
fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::invalid(format!("{op} expects [c,h,w] or [n,c,h,w], got {shape:?}"))),
    }
}

fn out_shape(n: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[c, h, w]` image into a `[c·kh·kw, oh·ow]` patch matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let p = g.cols();
    let mut cols = vec![S::zero(); g.rows() * p];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, out: &mut [S]) {
    let p = g.cols();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d<S: Scalar> {
    geom: ConvGeom,
    n: usize,
    out_c: usize,
    cols: Vec<Vec<S>>,
}

/// Cross-correlation of `input` with `weight` plus `bias`.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (n, c, h, w, batched) = nchw(tape.shape(input), "conv2d")?;
    let wshape = tape.shape(weight).to_vec();
    let [out_c, in_c, kh, kw] = wshape[..] else {
        return Err(Error::invalid(format!("conv2d weight must be rank 4, got {wshape:?}")));
    };
    if in_c != c {
        return Err(Error::shape("conv2d", tape.shape(input), &wshape));
    }
    if tape.shape(bias) != [out_c] {
        return Err(Error::shape("conv2d bias", tape.shape(bias), &[out_c]));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::invalid(format!(
            "conv2d output extent not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
        )));
    }
    let geom = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    };
    let (k, p) = (geom.rows(), geom.cols());
    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let b = tape.value(bias).data();
    let mut out = vec![S::zero(); n * out_c * p];
    let mut saved = Vec::with_capacity(n);
    for s in 0..n {
        let cols = im2col(&x[s * c * h * w..(s + 1) * c * h * w], &geom);
        let y = &mut out[s * out_c * p..(s + 1) * out_c * p];
        gemm_acc(out_c, k, p, wt, &cols, y);
        for (oc, row) in y.chunks_exact_mut(p).enumerate() {
            for v in row {
                *v = *v + b[oc];
            }
        }
        saved.push(cols);
    }
    let value = Tensor::from_parts(out_shape(n, out_c, geom.oh, geom.ow, batched), out);
    tape.record(
        &[input, weight, bias],
        value,
        Conv2d {
            geom,
            n,
            out_c,
            cols: saved,
        },
    )
}

impl<S: Scalar> Function<S> for Conv2d<S> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let geom = &self.geom;
        let (k, p, oc) = (geom.rows(), geom.cols(), self.out_c);
        let gy = g.data();

        let grad_x = if ctx.needs_grad(0) {
            let wt = transpose(oc, k, ctx.input(1).data());
            let img = geom.c * geom.h * geom.w;
            let mut gx = vec![S::zero(); self.n * img];
            let mut dcols = vec![S::zero(); k * p];
            for s in 0..self.n {
                dcols.iter_mut().for_each(|v| *v = S::zero());
                gemm_acc(k, oc, p, &wt, &gy[s * oc * p..(s + 1) * oc * p], &mut dcols);
                col2im(&dcols, geom, &mut gx[s * img..(s + 1) * img]);
            }
            Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), gx))
        } else {
            None
        };

        let grad_w = if ctx.needs_grad(1) {
            let mut gw = vec![S::zero(); oc * k];
            for s in 0..self.n {
                gemm_nt(oc, p, k, &gy[s * oc * p..(s + 1) * oc * p], &self.cols[s], &mut gw);
            }
            Some(Tensor::from_parts(ctx.input(1).shape().to_vec(), gw))
        } else {
            None
        };

        let grad_b = if ctx.needs_grad(2) {
            let mut gb = vec![S::zero(); oc];
            for s in 0..self.n {
                for (o, row) in gy[s * oc * p..(s + 1) * oc * p].chunks_exact(p).enumerate() {
                    gb[o] = gb[o] + row.iter().copied().sum::<S>();
                }
            }
            Some(Tensor::from_parts(vec![oc], gb))
        } else {
            None
        };

        Ok(vec![grad_x, grad_w, grad_b])
    }
}

fn pool_dims(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::invalid(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

struct MaxPool {
    argmax: Vec<usize>,
}

/// Per-window maximum. Ties go to the lowest row-major index in the window.
pub fn maxpool2d<S: Scalar>(tape: &mut Tape<S>, input: Var, window: usize, stride: usize) -> Result<Var> {
    let (n, c, h, w, batched) = nchw(tape.shape(input), "maxpool2d")?;
    let (oh, ow) = pool_dims(h, w, window, stride)?;
    let x = tape.value(input).data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_parts(out_shape(n, c, oh, ow, batched), out);
    tape.record(&[input], value, MaxPool { argmax })
}

impl<S: Scalar> Function<S> for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let mut gx = vec![S::zero(); ctx.input(0).numel()];
        for (&src, &u) in self.argmax.iter().zip(g.data()) {
            gx[src] = gx[src] + u;
        }
        Ok(vec![Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), gx))])
    }
}

struct AvgPool {
    window: usize,
    stride: usize,
}

/// Per-window mean.
pub fn avgpool2d<S: Scalar>(tape: &mut Tape<S>, input: Var, window: usize, stride: usize) -> Result<Var> {
    let (n, c, h, w, batched) = nchw(tape.shape(input), "avgpool2d")?;
    let (oh, ow) = pool_dims(h, w, window, stride)?;
    let x = tape.value(input).data();
    let inv = S::one() / S::lit((window * window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..window {
                    for dx in 0..window {
                        acc = acc + x[base + (oy * stride + dy) * w + ox * stride + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    let value = Tensor::from_parts(out_shape(n, c, oh, ow, batched), out);
    tape.record(&[input], value, AvgPool { window, stride })
}

impl<S: Scalar> Function<S> for AvgPool {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let (n, c, h, w, _) = nchw(ctx.input(0).shape(), "avgpool2d")?;
        let (oh, ow) = pool_dims(h, w, self.window, self.stride)?;
        let inv = S::one() / S::lit((self.window * self.window) as f64);
        let mut gx = vec![S::zero(); n * c * h * w];
        let gy = g.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let u = gy[(plane * oh + oy) * ow + ox] * inv;
                    for dy in 0..self.window {
                        for dx in 0..self.window {
                            let idx = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                            gx[idx] = gx[idx] + u;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), gx))])
    }
}

struct Linear {
    batch: usize,
    m: usize,
    n: usize,
}

/// `y = W·x + b` for `x: [n]` or row-wise for `x: [batch, n]`.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(input).to_vec();
    let ws = tape.shape(weight).to_vec();
    let [m, n] = ws[..] else {
        return Err(Error::invalid(format!("linear weight must be rank 2, got {ws:?}")));
    };
    let (batch, batched) = match xs[..] {
        [k] if k == n => (1, false),
        [b, k] if k == n => (b, true),
        _ => return Err(Error::shape("linear", &xs, &ws)),
    };
    if tape.shape(bias) != [m] {
        return Err(Error::shape("linear bias", tape.shape(bias), &[m]));
    }
    let wt = transpose(m, n, tape.value(weight).data());
    let mut out = vec![S::zero(); batch * m];
    gemm_acc(batch, n, m, tape.value(input).data(), &wt, &mut out);
    let b = tape.value(bias).data();
    for row in out.chunks_exact_mut(m) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v = *v + bb;
        }
    }
    let shape = if batched { vec![batch, m] } else { vec![m] };
    tape.record(&[input, weight, bias], Tensor::from_parts(shape, out), Linear { batch, m, n })
}

impl<S: Scalar> Function<S> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let (b, m, n) = (self.batch, self.m, self.n);
        let gy = g.data();
        let gx = ctx.needs_grad(0).then(|| {
            let mut gx = vec![S::zero(); b * n];
            gemm_acc(b, m, n, gy, ctx.input(1).data(), &mut gx);
            Tensor::from_parts(ctx.input(0).shape().to_vec(), gx)
        });
        let gw = ctx.needs_grad(1).then(|| {
            let gyt = transpose(b, m, gy);
            let mut gw = vec![S::zero(); m * n];
            gemm_acc(m, b, n, &gyt, ctx.input(0).data(), &mut gw);
            Tensor::from_parts(vec![m, n], gw)
        });
        let gb = ctx.needs_grad(2).then(|| {
            let mut gb = vec![S::zero(); m];
            for row in gy.chunks_exact(m) {
                for (acc, &u) in gb.iter_mut().zip(row) {
                    *acc = *acc + u;
                }
            }
            Tensor::from_parts(vec![m], gb)
        });
        Ok(vec![gx, gw, gb])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<S: Scalar = f32> {
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> BatchNormStats<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

struct BatchNorm<S: Scalar> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    mode: Mode,
    n: usize,
    c: usize,
    hw: usize,
}

/// Per-channel normalization. Train mode uses batch statistics and updates
/// `stats` (momentum 0.1, unbiased running variance); eval mode applies the
/// running statistics as a fixed affine map.
pub fn batchnorm2d<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    gamma: Var,
    beta: Var,
    stats: &mut BatchNormStats<S>,
    mode: Mode,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    let (n, c, h, w, _) = nchw(&shape, "batchnorm2d")?;
    for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
        if tape.shape(v) != [c] {
            return Err(Error::invalid(format!(
                "batchnorm2d {what} has shape {:?}, expected [{c}]",
                tape.shape(v)
            )));
        }
    }
    if stats.running_mean.shape() != [c] || stats.running_var.shape() != [c] {
        return Err(Error::invalid("batchnorm2d running stats do not match channel count"));
    }
    let hw = h * w;
    let count = n * hw;
    let x = tape.value(input).data();
    let gm = tape.value(gamma).data();
    let bt = tape.value(beta).data();
    let eps = S::lit(BN_EPS);

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut acc = S::zero();
                for s in 0..n {
                    acc = acc + x[(s * c + ch) * hw..][..hw].iter().copied().sum::<S>();
                }
                let mu = acc / S::lit(count as f64);
                let mut sq = S::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * hw..][..hw] {
                        sq = sq + (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / S::lit(count as f64);
            }
            let m = S::lit(BN_MOMENTUM);
            let unbias = if count > 1 {
                S::lit(count as f64 / (count - 1) as f64)
            } else {
                S::one()
            };
            let rm = stats.running_mean.data();
            let rv = stats.running_var.data();
            let new_rm = (0..c).map(|i| (S::one() - m) * rm[i] + m * mean[i]).collect();
            let new_rv = (0..c)
                .map(|i| (S::one() - m) * rv[i] + m * var[i] * unbias)
                .collect();
            stats.running_mean = Tensor::from_parts(vec![c], new_rm);
            stats.running_var = Tensor::from_parts(vec![c], new_rv);
            (mean, var)
        }
        Mode::Eval => (
            stats.running_mean.data().to_vec(),
            stats.running_var.data().to_vec(),
        ),
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gm[ch] * xh + bt[ch];
            }
        }
    }
    tape.record(
        &[input, gamma, beta],
        Tensor::from_parts(shape, out),
        BatchNorm {
            xhat,
            inv_std,
            mode,
            n,
            c,
            hw,
        },
    )
}

impl<S: Scalar> Function<S> for BatchNorm<S> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let (n, c, hw) = (self.n, self.c, self.hw);
        let gy = g.data();
        let gamma = ctx.input(1).data();
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] = dgamma[ch] + gy[i] * self.xhat[i];
                    dbeta[ch] = dbeta[ch] + gy[i];
                }
            }
        }
        let gx = ctx.needs_grad(0).then(|| {
            let mut gx = vec![S::zero(); gy.len()];
            let count = S::lit((n * hw) as f64);
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                match self.mode {
                    Mode::Eval => {
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for i in off..off + hw {
                                gx[i] = gy[i] * scale;
                            }
                        }
                    }
                    Mode::Train => {
                        // dx = γ·σ⁻¹·(dy − mean(dy) − x̂·mean(dy·x̂))
                        let mean_dy = dbeta[ch] / count;
                        let mean_dy_xhat = dgamma[ch] / count;
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for i in off..off + hw {
                                gx[i] = scale * (gy[i] - mean_dy - self.xhat[i] * mean_dy_xhat);
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(ctx.input(0).shape().to_vec(), gx)
        });
        Ok(vec![
            gx,
            Some(Tensor::from_parts(vec![c], dgamma)),
            Some(Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

struct SoftmaxCrossEntropy<S: Scalar> {
    probs: Vec<S>,
    labels: Vec<usize>,
    classes: usize,
}

/// Mean of `−log softmax(logits)[label]` over the batch, with max-subtraction.
/// `logits` is `[classes]` (one label) or `[batch, classes]`.
pub fn softmax_cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (batch, classes) = match shape[..] {
        [k] => (1, k),
        [b, k] => (b, k),
        _ => return Err(Error::invalid(format!("logits must be rank 1 or 2, got {shape:?}"))),
    };
    if labels.len() != batch {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let z = tape.value(logits).data();
    let mut probs = vec![S::zero(); z.len()];
    let mut total = S::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = &z[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: S = exps.iter().copied().sum();
        for (p, e) in probs[b * classes..].iter_mut().zip(&exps) {
            *p = *e / denom;
        }
        total = total + (denom.ln() - (row[label] - max));
    }
    let loss = total / S::lit(batch as f64);
    tape.record(
        &[logits],
        Tensor::scalar(loss),
        SoftmaxCrossEntropy {
            probs,
            labels: labels.to_vec(),
            classes,
        },
    )
}

impl<S: Scalar> Function<S> for SoftmaxCrossEntropy<S> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let scale = g.item()? / S::lit(self.labels.len() as f64);
        let mut gz: Vec<S> = self.probs.iter().map(|&p| p * scale).collect();
        for (b, &label) in self.labels.iter().enumerate() {
            let i = b * self.classes + label;
            gz[i] = gz[i] - scale;
        }
        Ok(vec![Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), gz))])
    }
}

pub const SSLM_MAGIC: &[u8; 4] = b"SSLM";
pub const SSLM_VERSION: u8 = 1;

/// Writes named tensors in the `SSLM` checkpoint format: magic, version,
/// u32 count, then per entry a u16 name length, the UTF-8 name and an
/// `SSLT` tensor.
pub fn write_checkpoint<S: Scalar>(w: &mut impl Write, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let io = |e| Error::format("checkpoint", format!("write failed: {e}"));
    w.write_all(SSLM_MAGIC).map_err(io)?;
    w.write_all(&[SSLM_VERSION]).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        t.write_to(w).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> Result<Vec<(String, Tensor<S>)>> {
    let bad = |e: std::io::Error| Error::format("checkpoint", e.to_string());
    let mut head = [0u8; 9];
    r.read_exact(&mut head).map_err(bad)?;
    if &head[..4] != SSLM_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    if head[4] != SSLM_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {}", head[4])));
    }
    let count = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(bad)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(bad)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
        entries.push((name, Tensor::read_from(r)?));
    }
    Ok(entries)
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, entries)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<S>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}
