//! Forward kernels and their adjoints.
//!
//! Every function here is a pure map over [`Tensor`]s. The graph in
//! [`crate::graph`] records calls to these kernels and uses the `*_grad`
//! companions during the backward sweep; the plain (graph-free) forward pass
//! in [`crate::network`] calls the same kernels directly.
//!
//! Layouts follow the usual NCHW convention:
//! - dense input `[batch, in]`, weight `[out, in]`, bias `[out]`
//! - conv2d input `[batch, c_in, h, w]`, kernel `[c_out, c_in, kh, kw]`
//! - conv_transpose2d input `[batch, c_in, h, w]`, kernel `[c_in, c_out, kh, kw]`
//!
//! With these layouts `conv_transpose2d(y, k)` is the adjoint of
//! `conv2d(x, k)` for the same kernel tensor and geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Max,
}

impl ElementwiseKind {
    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Max => a.max(b),
        }
    }

    /// Partial derivatives `(d/da, d/db)` at `(a, b)`. Ties in `max` route
    /// the gradient to `a`.
    pub fn partials(self, a: f32, b: f32) -> (f32, f32) {
        match self {
            Self::Add => (1.0, 1.0),
            Self::Sub => (1.0, -1.0),
            Self::Mul => (b, a),
            Self::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "elementwise",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    a.zip_map(b, |x, y| kind.apply(x, y))
}

pub fn elementwise_scalar(kind: ElementwiseKind, a: &Tensor, b: f32) -> Tensor {
    a.map(|x| kind.apply(x, b))
}

// ---------------------------------------------------------------------------
// Dense

fn dense_dims(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(Error::InvalidGeometry {
            op: "dense",
            reason: format!("expected 2-D input and weight, got {:?} and {:?}", x.shape(), w.shape()),
        });
    }
    let (batch, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    if w.shape()[1] != inp {
        return Err(Error::ShapeMismatch {
            op: "dense",
            expected: vec![out, inp],
            actual: w.shape().to_vec(),
        });
    }
    bias.expect_shape("dense bias", &[out])?;
    Ok((batch, inp, out))
}

/// `y = x Wᵀ + bias`.
pub fn dense(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, inp, out) = dense_dims(x, w, bias)?;
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let mut y = vec![0.0f32; batch * out];
    for n in 0..batch {
        let row = &xd[n * inp..(n + 1) * inp];
        for o in 0..out {
            let wrow = &wd[o * inp..(o + 1) * inp];
            let dot: f32 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            y[n * out + o] = dot + bd[o];
        }
    }
    Tensor::new(vec![batch, out], y)
}

pub fn dense_grad_input(dy: &Tensor, w: &Tensor) -> Tensor {
    let (batch, out) = (dy.shape()[0], dy.shape()[1]);
    let inp = w.shape()[1];
    let (dyd, wd) = (dy.data(), w.data());
    let mut dx = vec![0.0f32; batch * inp];
    for n in 0..batch {
        let dst = &mut dx[n * inp..(n + 1) * inp];
        for o in 0..out {
            let g = dyd[n * out + o];
            if g == 0.0 {
                continue;
            }
            for (d, &wv) in dst.iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                *d += g * wv;
            }
        }
    }
    Tensor::new(vec![batch, inp], dx).expect("dense grad shape")
}

pub fn dense_grad_weight(dy: &Tensor, x: &Tensor) -> Tensor {
    let (batch, out) = (dy.shape()[0], dy.shape()[1]);
    let inp = x.shape()[1];
    let (dyd, xd) = (dy.data(), x.data());
    let mut dw = vec![0.0f32; out * inp];
    for n in 0..batch {
        let row = &xd[n * inp..(n + 1) * inp];
        for o in 0..out {
            let g = dyd[n * out + o];
            for (d, &xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(row) {
                *d += g * xv;
            }
        }
    }
    Tensor::new(vec![out, inp], dw).expect("dense grad shape")
}

/// Sums a `[batch, features]` gradient over the batch.
pub fn dense_grad_bias(dy: &Tensor) -> Tensor {
    let (batch, out) = (dy.shape()[0], dy.shape()[1]);
    let mut db = vec![0.0f32; out];
    for n in 0..batch {
        for (d, &g) in db.iter_mut().zip(&dy.data()[n * out..(n + 1) * out]) {
            *d += g;
        }
    }
    Tensor::from_vec(db)
}

// ---------------------------------------------------------------------------
// Convolutions

/// Stride, symmetric zero padding, and (transposed convolution only) extra
/// rows/columns appended to the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    /// Output extent of a convolution over an input extent, if at least one.
    pub fn conv_out(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution, if at least one.
    pub fn conv_transpose_out(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || input == 0 {
            return None;
        }
        let full = (input - 1) * self.stride + kernel + self.output_padding;
        full.checked_sub(2 * self.padding).filter(|&v| v >= 1)
    }
}

fn four_d(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::InvalidGeometry {
            op,
            reason: format!("expected a 4-D tensor, got {:?}", t.shape()),
        }),
    }
}

/// Cross-correlation of `x: [n, ci, h, w]` with `k: [co, ci, kh, kw]` onto an
/// `[n, co, oh, ow]` grid. Taps falling outside `x` read as zero.
fn correlate(x: &Tensor, k: &Tensor, g: ConvGeometry, oh: usize, ow: usize) -> Tensor {
    let [n, ci, h, w] = four_d("correlate", x).expect("checked by caller");
    let [co, _, kh, kw] = four_d("correlate", k).expect("checked by caller");
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0f32; n * co * oh * ow];
    let (s, p) = (g.stride as isize, g.padding as isize);
    for b in 0..n {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for c in 0..ci {
                let src = &xd[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                let ker = &kd[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                for i in 0..oh {
                    for ki in 0..kh {
                        let r = i as isize * s + ki as isize - p;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let srow = &src[r as usize * w..(r as usize + 1) * w];
                        let krow = &ker[ki * kw..(ki + 1) * kw];
                        for j in 0..ow {
                            let base = j as isize * s - p;
                            let mut acc = 0.0f32;
                            for (kj, &kv) in krow.iter().enumerate() {
                                let col = base + kj as isize;
                                if col >= 0 && col < w as isize {
                                    acc += srow[col as usize] * kv;
                                }
                            }
                            dst[i * ow + j] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).expect("correlate shape")
}

/// Adjoint of [`correlate`]: scatters `y: [n, co, oh, ow]` back through
/// `k: [co, ci, kh, kw]` onto an `[n, ci, h, w]` grid.
fn scatter(y: &Tensor, k: &Tensor, g: ConvGeometry, h: usize, w: usize) -> Tensor {
    let [n, co, oh, ow] = four_d("scatter", y).expect("checked by caller");
    let [_, ci, kh, kw] = four_d("scatter", k).expect("checked by caller");
    let (yd, kd) = (y.data(), k.data());
    let mut out = vec![0.0f32; n * ci * h * w];
    let (s, p) = (g.stride as isize, g.padding as isize);
    for b in 0..n {
        for o in 0..co {
            let src = &yd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for c in 0..ci {
                let dst = &mut out[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                let ker = &kd[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                for i in 0..oh {
                    for ki in 0..kh {
                        let r = i as isize * s + ki as isize - p;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[r as usize * w..(r as usize + 1) * w];
                        let krow = &ker[ki * kw..(ki + 1) * kw];
                        for j in 0..ow {
                            let v = src[i * ow + j];
                            if v == 0.0 {
                                continue;
                            }
                            let base = j as isize * s - p;
                            for (kj, &kv) in krow.iter().enumerate() {
                                let col = base + kj as isize;
                                if col >= 0 && col < w as isize {
                                    drow[col as usize] += v * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, ci, h, w], out).expect("scatter shape")
}

/// Gradient of `correlate(x, k)` with respect to `k`, given the output
/// gradient `dy: [n, co, oh, ow]`.
fn correlate_kernel_grad(x: &Tensor, dy: &Tensor, g: ConvGeometry, kh: usize, kw: usize) -> Tensor {
    let [n, ci, h, w] = four_d("kernel_grad", x).expect("checked by caller");
    let [_, co, oh, ow] = four_d("kernel_grad", dy).expect("checked by caller");
    let (xd, gd) = (x.data(), dy.data());
    let mut out = vec![0.0f32; co * ci * kh * kw];
    let (s, p) = (g.stride as isize, g.padding as isize);
    for b in 0..n {
        for o in 0..co {
            let grad = &gd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for c in 0..ci {
                let src = &xd[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                let dst = &mut out[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut acc = 0.0f32;
                        for i in 0..oh {
                            let r = i as isize * s + ki as isize - p;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            for j in 0..ow {
                                let col = j as isize * s + kj as isize - p;
                                if col >= 0 && col < w as isize {
                                    acc += grad[i * ow + j] * src[r as usize * w + col as usize];
                                }
                            }
                        }
                        dst[ki * kw + kj] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ci, kh, kw], out).expect("kernel grad shape")
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let [n, c, h, w] = four_d("bias", y).expect("4-D output");
    let plane = h * w;
    let bd = bias.data();
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            for v in &mut y.data_mut()[start..start + plane] {
                *v += bd[ch];
            }
        }
    }
}

/// Sums an `[n, c, ...]` gradient down to a per-channel `[c]` vector.
pub fn channel_sum(dy: &Tensor) -> Tensor {
    let n = dy.shape()[0];
    let c = dy.shape()[1];
    let plane: usize = dy.shape()[2..].iter().product();
    let mut out = vec![0.0f32; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *o += dy.data()[start..start + plane].iter().sum::<f32>();
        }
    }
    Tensor::from_vec(out)
}

fn check_conv(
    op: &'static str,
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    transposed: bool,
) -> Result<([usize; 4], [usize; 4])> {
    let xs = four_d(op, x)?;
    let ks = four_d(op, k)?;
    // conv2d kernels are [out, in, ..]; transposed kernels are [in, out, ..].
    let (k_in, k_out) = if transposed { (ks[0], ks[1]) } else { (ks[1], ks[0]) };
    if k_in != xs[1] {
        return Err(Error::InvalidGeometry {
            op,
            reason: format!("input has {} channels but kernel expects {}", xs[1], k_in),
        });
    }
    if let Some(b) = bias {
        b.expect_shape(op, &[k_out])?;
    }
    Ok((xs, ks))
}

pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let (xs, ks) = check_conv("conv2d", x, k, bias, false)?;
    if g.output_padding != 0 {
        return Err(Error::InvalidGeometry {
            op: "conv2d",
            reason: "output_padding only applies to transposed convolutions".into(),
        });
    }
    let (oh, ow) = conv2d_out_hw(g, xs[2], xs[3], ks[2], ks[3])?;
    let mut y = correlate(x, k, g, oh, ow);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    Ok(y)
}

pub fn conv2d_out_hw(g: ConvGeometry, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
    match (g.conv_out(h, kh), g.conv_out(w, kw)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::InvalidGeometry {
            op: "conv2d",
            reason: format!("{h}x{w} input with {kh}x{kw} kernel and {g:?} yields an empty output"),
        }),
    }
}

pub fn conv_transpose2d_out_hw(
    g: ConvGeometry,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Result<(usize, usize)> {
    if g.output_padding >= g.stride.max(1) {
        return Err(Error::InvalidGeometry {
            op: "conv_transpose2d",
            reason: format!("output_padding {} must be below stride {}", g.output_padding, g.stride),
        });
    }
    match (g.conv_transpose_out(h, kh), g.conv_transpose_out(w, kw)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::InvalidGeometry {
            op: "conv_transpose2d",
            reason: format!("{h}x{w} input with {kh}x{kw} kernel and {g:?} yields an empty output"),
        }),
    }
}

pub fn conv2d_grad_input(dy: &Tensor, k: &Tensor, g: ConvGeometry, h: usize, w: usize) -> Tensor {
    scatter(dy, k, g, h, w)
}

pub fn conv2d_grad_kernel(x: &Tensor, dy: &Tensor, k_shape: &[usize], g: ConvGeometry) -> Tensor {
    correlate_kernel_grad(x, dy, g, k_shape[2], k_shape[3])
}

pub fn conv_transpose2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let (xs, ks) = check_conv("conv_transpose2d", x, k, bias, true)?;
    let (oh, ow) = conv_transpose2d_out_hw(g, xs[2], xs[3], ks[2], ks[3])?;
    let mut y = scatter(x, k, g, oh, ow);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    Ok(y)
}

pub fn conv_transpose2d_grad_input(dy: &Tensor, k: &Tensor, g: ConvGeometry, h: usize, w: usize) -> Tensor {
    correlate(dy, k, g, h, w)
}

pub fn conv_transpose2d_grad_kernel(x: &Tensor, dy: &Tensor, k_shape: &[usize], g: ConvGeometry) -> Tensor {
    // The transposed kernel [ci, co, ..] plays the role of a correlation
    // kernel from dy (co channels) onto x (ci channels).
    correlate_kernel_grad(dy, x, g, k_shape[2], k_shape[3])
}

// ---------------------------------------------------------------------------
// Pointwise activations

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// `x` for `x >= 0`, `slope * x` otherwise.
    LeakyRelu { slope: f32 },
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    pub const LEAKY_RELU_DEFAULT: Self = Self::LeakyRelu { slope: 0.2 };

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Self::Relu => x.max(0.0),
            Self::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Self::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of the input `x` and output `y = apply(x)`.
    pub fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Self::Sigmoid => y * (1.0 - y),
            Self::Tanh => 1.0 - y * y,
        }
    }
}

pub fn activation(kind: ActivationKind, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn activation_grad(kind: ActivationKind, x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(dy.data())
        .map(|((&xv, &yv), &g)| g * kind.derivative(xv, yv))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Batch normalisation (inference statistics only)

/// Per-channel parameters for [`batchnorm_inference`].
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams<'a> {
    pub mean: &'a Tensor,
    pub var: &'a Tensor,
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub eps: f32,
}

impl BatchNormParams<'_> {
    fn channels(&self, x: &Tensor) -> Result<usize> {
        if x.ndim() < 2 {
            return Err(Error::InvalidGeometry {
                op: "batchnorm",
                reason: format!("expected [batch, channels, ...], got {:?}", x.shape()),
            });
        }
        let c = x.shape()[1];
        for t in [self.mean, self.var, self.gamma, self.beta] {
            t.expect_shape("batchnorm", &[c])?;
        }
        Ok(c)
    }

    /// `1 / sqrt(var + eps)` per channel.
    fn inv_std(&self) -> Result<Vec<f32>> {
        self.var
            .data()
            .iter()
            .enumerate()
            .map(|(ch, &v)| {
                let d = v + self.eps;
                if d > 0.0 {
                    Ok(1.0 / d.sqrt())
                } else {
                    Err(Error::NonPositiveVariance { channel: ch, value: d })
                }
            })
            .collect()
    }
}

fn for_each_channel(shape: &[usize], mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            f(ch, start..start + plane);
        }
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, with channel dimension 1.
pub fn batchnorm_inference(x: &Tensor, p: BatchNormParams<'_>) -> Result<Tensor> {
    p.channels(x)?;
    let inv = p.inv_std()?;
    let (m, g, b) = (p.mean.data(), p.gamma.data(), p.beta.data());
    let mut y = x.clone();
    for_each_channel(x.shape(), |ch, range| {
        for v in &mut y.data_mut()[range] {
            *v = g[ch] * ((*v - m[ch]) * inv[ch]) + b[ch];
        }
    });
    Ok(y)
}

/// Gradients of [`batchnorm_inference`] with respect to
/// `(x, mean, var, gamma, beta)`.
pub struct BatchNormGrads {
    pub x: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_grad(x: &Tensor, p: BatchNormParams<'_>, dy: &Tensor) -> Result<BatchNormGrads> {
    let c = p.channels(x)?;
    let inv = p.inv_std()?;
    let (m, g) = (p.mean.data(), p.gamma.data());
    let mut dx = Tensor::zeros(x.shape());
    let (mut dmean, mut dvar, mut dgamma, mut dbeta) =
        (vec![0.0f32; c], vec![0.0f32; c], vec![0.0f32; c], vec![0.0f32; c]);
    let (xd, gd) = (x.data(), dy.data());
    for_each_channel(x.shape(), |ch, range| {
        let scale = g[ch] * inv[ch];
        let inv3 = inv[ch] * inv[ch] * inv[ch];
        for idx in range {
            let grad = gd[idx];
            let centered = xd[idx] - m[ch];
            dx.data_mut()[idx] = grad * scale;
            dmean[ch] -= grad * scale;
            dvar[ch] += grad * g[ch] * centered * (-0.5 * inv3);
            dgamma[ch] += grad * centered * inv[ch];
            dbeta[ch] += grad;
        }
    });
    Ok(BatchNormGrads {
        x: dx,
        mean: Tensor::from_vec(dmean),
        var: Tensor::from_vec(dvar),
        gamma: Tensor::from_vec(dgamma),
        beta: Tensor::from_vec(dbeta),
    })
}

// ---------------------------------------------------------------------------
// Nearest-neighbour upsampling

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = four_d("upsample_nearest", x)?;
    if factor == 0 {
        return Err(Error::InvalidGeometry {
            op: "upsample_nearest",
            reason: "factor must be positive".into(),
        });
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / factor) * w + j / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_grad(dy: &Tensor, factor: usize) -> Tensor {
    let [n, c, oh, ow] = four_d("upsample_nearest", dy).expect("4-D gradient");
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / factor) * w + j / factor] += src[i * ow + j];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("upsample grad shape")
}
