//! Straightforward f64 re-implementation of every layer op, written from the
//! textbook definitions and sharing no code with the engine. Used as the
//! finite-difference and forward-value oracle.

#![allow(dead_code)]

use latprobe_core::network::{LayerSpec, NetworkSpec, Weights};
use latprobe_core::ops::{ActivationKind, ConvGeometry};
use latprobe_core::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    fn at4(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        let [_, ch, h, w] = self.dims4();
        self.data[((b * ch + c) * h + i) * w + j]
    }

    fn dims4(&self) -> [usize; 4] {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    zip(a, b, |x, y| x + y)
}
pub fn sub(a: &Arr, b: &Arr) -> Arr {
    zip(a, b, |x, y| x - y)
}
pub fn mul(a: &Arr, b: &Arr) -> Arr {
    zip(a, b, |x, y| x * y)
}
pub fn max(a: &Arr, b: &Arr) -> Arr {
    zip(a, b, f64::max)
}

fn zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

/// `y[n, o] = b[o] + sum_i x[n, i] w[o, i]`
pub fn dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, inp) = (x.shape[0], x.shape[1]);
    let out = w.shape[0];
    let mut y = vec![0.0; n * out];
    for s in 0..n {
        for o in 0..out {
            let mut acc = b.data[o];
            for i in 0..inp {
                acc += x.data[s * inp + i] * w.data[o * inp + i];
            }
            y[s * out + o] = acc;
        }
    }
    Arr::new(vec![n, out], y)
}

/// Cross-correlation, kernel `[co, ci, kh, kw]`, zero padding.
pub fn conv2d(x: &Arr, k: &Arr, bias: Option<&Arr>, g: ConvGeometry) -> Arr {
    let [n, ci, h, w] = x.dims4();
    let [co, _, kh, kw] = k.dims4();
    let oh = (h + 2 * g.padding - kh) / g.stride + 1;
    let ow = (w + 2 * g.padding - kw) / g.stride + 1;
    let mut y = Arr::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb.data[o]);
                    for c in 0..ci {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let r = (i * g.stride + ki) as isize - g.padding as isize;
                                let q = (j * g.stride + kj) as isize - g.padding as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                    acc += x.at4(b, c, r as usize, q as usize) * k.at4(o, c, ki, kj);
                                }
                            }
                        }
                    }
                    y.data[((b * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution, kernel `[ci, co, kh, kw]`: every input pixel
/// stamps a kernel-weighted copy at `stride * position - padding`; output
/// extent `(h - 1) * stride - 2 * padding + k + output_padding`.
pub fn conv_transpose2d(x: &Arr, k: &Arr, bias: Option<&Arr>, g: ConvGeometry) -> Arr {
    let [n, ci, h, w] = x.dims4();
    let [_, co, kh, kw] = k.dims4();
    let oh = (h - 1) * g.stride + kh + g.output_padding - 2 * g.padding;
    let ow = (w - 1) * g.stride + kw + g.output_padding - 2 * g.padding;
    let mut y = Arr::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            let base = (b * co + o) * oh * ow;
            if let Some(bb) = bias {
                for v in &mut y.data[base..base + oh * ow] {
                    *v = bb.data[o];
                }
            }
            for c in 0..ci {
                for i in 0..h {
                    for j in 0..w {
                        let v = x.at4(b, c, i, j);
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let r = (i * g.stride + ki) as isize - g.padding as isize;
                                let q = (j * g.stride + kj) as isize - g.padding as isize;
                                if r >= 0 && q >= 0 && (r as usize) < oh && (q as usize) < ow {
                                    y.data[base + r as usize * ow + q as usize] += v * k.at4(c, o, ki, kj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Per-channel affine normalisation with fixed statistics; channel axis 1.
pub fn batchnorm(x: &Arr, mean: &Arr, var: &Arr, gamma: &Arr, beta: &Arr, eps: f64) -> Arr {
    let c = x.shape[1];
    let plane: usize = x.shape[2..].iter().product();
    let mut y = x.clone();
    for (idx, v) in y.data.iter_mut().enumerate() {
        let ch = (idx / plane) % c;
        *v = gamma.data[ch] * (*v - mean.data[ch]) / (var.data[ch] + eps).sqrt() + beta.data[ch];
    }
    y
}

pub fn activation(kind: ActivationKind, x: &Arr) -> Arr {
    let f = |v: f64| match kind {
        ActivationKind::Relu => v.max(0.0),
        ActivationKind::LeakyRelu { slope } => {
            if v > 0.0 {
                v
            } else {
                f64::from(slope) * v
            }
        }
        ActivationKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        ActivationKind::Tanh => v.tanh(),
    };
    Arr::new(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect())
}

pub fn upsample_nearest(x: &Arr, factor: usize) -> Arr {
    let [n, c, h, w] = x.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Arr::zeros(&[n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    y.data[((b * c + ch) * oh + i) * ow + j] = x.at4(b, ch, i / factor, j / factor);
                }
            }
        }
    }
    y
}

fn weight(weights: &Weights, name: &str) -> Arr {
    Arr::from_tensor(&weights[name])
}

pub fn layer(spec: &LayerSpec, weights: &Weights, x: &Arr) -> Arr {
    match spec {
        LayerSpec::Dense { weight: w, bias, .. } => dense(x, &weight(weights, w), &weight(weights, bias)),
        LayerSpec::Conv2d {
            geometry,
            weight: w,
            bias,
            ..
        } => conv2d(x, &weight(weights, w), bias.as_ref().map(|b| weight(weights, b)).as_ref(), *geometry),
        LayerSpec::ConvTranspose2d {
            geometry,
            weight: w,
            bias,
            ..
        } => conv_transpose2d(
            x,
            &weight(weights, w),
            bias.as_ref().map(|b| weight(weights, b)).as_ref(),
            *geometry,
        ),
        LayerSpec::Batchnorm {
            eps,
            mean,
            var,
            gamma,
            beta,
            ..
        } => batchnorm(
            x,
            &weight(weights, mean),
            &weight(weights, var),
            &weight(weights, gamma),
            &weight(weights, beta),
            f64::from(*eps),
        ),
        LayerSpec::Activation { function } => activation(*function, x),
        LayerSpec::Reshape { shape } => {
            let mut full = vec![x.shape[0]];
            full.extend(shape);
            x.clone().reshape(&full)
        }
        LayerSpec::UpsampleNearest { factor } => upsample_nearest(x, *factor),
        LayerSpec::DropoutIdentity { .. } => x.clone(),
    }
}

/// Forward pass with `p[o] * sigma[o]` added at injection boundary `o`.
/// `perts[o] == None` leaves that boundary alone.
pub fn forward(spec: &NetworkSpec, weights: &Weights, input: &Arr, perts: &[Option<Arr>], sigma: &[Arr]) -> Arr {
    let inject = |boundary: usize, x: Arr| -> Arr {
        match spec.injection_points.iter().position(|&b| b == boundary) {
            Some(o) => match &perts[o] {
                Some(p) => add(&x, &mul(p, &sigma[o])),
                None => x,
            },
            None => x,
        }
    };
    let mut x = inject(0, input.clone());
    for (i, l) in spec.layers.iter().enumerate() {
        x = layer(l, weights, &x);
        x = inject(i + 1, x);
    }
    x
}

/// `max_j out_j - out_t`
pub fn cw(out: &[f64], t: usize) -> f64 {
    out.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - out[t]
}

/// Central difference of `f` along coordinate `idx` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[idx] += h;
    let fp = f(&xp);
    xp[idx] = x[idx] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-5;

/// `|a - n| <= max(rel * max(|a|, |n|), floor)`
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= (REL_TOL * analytic.abs().max(numeric.abs())).max(ABS_FLOOR)
}
