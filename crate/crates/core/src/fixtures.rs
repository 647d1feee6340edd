//! Deterministic random-weight networks for tests, demos and benchmarks.
//!
//! The generator follows the small convolutional MNIST generator layout
//! (dense 64, three 5x5 stride-2 transposed convolutions with 32, 8 and 4
//! maps, dense 784, sigmoid) with perturbations accepted before each ReLU /
//! batch-norm block. Weights are random; batch-norm statistics are fitted to
//! the generator's own activations so every layer stays in a sane range.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{LayerSpec, Network, NetworkSpec, Role, Weights};
use crate::ops::{ActivationKind, ConvGeometry};
use crate::sigma::sample_latents;
use crate::tensor::Tensor;

pub const MNIST_LATENT_DIM: usize = 128;
pub const MNIST_CLASSES: usize = 10;

/// Boundaries of the fixture generator that accept perturbations: after the
/// first dense layer and after each of the first three transposed convs.
pub const MNIST_INJECTION_POINTS: [usize; 4] = [1, 4, 8, 12];

/// Incrementally assembles a layer list and its weights.
struct Builder {
    layers: Vec<LayerSpec>,
    weights: Weights,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            weights: Weights::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn name(&self, what: &str) -> String {
        format!("l{}.{what}", self.layers.len() + 1)
    }

    fn dense(&mut self, inp: usize, out: usize, gain: f32) {
        let (w, b) = (self.name("weight"), self.name("bias"));
        let std = gain / (inp as f32).sqrt();
        self.weights.insert(w.clone(), Tensor::randn(&[out, inp], std, &mut self.rng));
        self.weights.insert(b.clone(), Tensor::randn(&[out], 0.05, &mut self.rng));
        self.layers.push(LayerSpec::Dense {
            in_features: inp,
            out_features: out,
            weight: w,
            bias: b,
        });
    }

    fn conv(&mut self, inp: usize, out: usize, k: usize, geometry: ConvGeometry) {
        let (w, b) = (self.name("weight"), self.name("bias"));
        let std = (2.0 / (inp * k * k) as f32).sqrt();
        self.weights.insert(w.clone(), Tensor::randn(&[out, inp, k, k], std, &mut self.rng));
        self.weights.insert(b.clone(), Tensor::randn(&[out], 0.05, &mut self.rng));
        self.layers.push(LayerSpec::Conv2d {
            in_channels: inp,
            out_channels: out,
            kernel_size: [k, k],
            geometry,
            weight: w,
            bias: Some(b),
        });
    }

    fn conv_t(&mut self, inp: usize, out: usize, k: usize, geometry: ConvGeometry) {
        let (w, b) = (self.name("weight"), self.name("bias"));
        // Each output pixel sees roughly (k / stride)^2 taps per input map.
        let fan_in = inp * (k * k) / (geometry.stride * geometry.stride).max(1);
        let std = (2.0 / fan_in as f32).sqrt();
        self.weights.insert(w.clone(), Tensor::randn(&[inp, out, k, k], std, &mut self.rng));
        self.weights.insert(b.clone(), Tensor::randn(&[out], 0.05, &mut self.rng));
        self.layers.push(LayerSpec::ConvTranspose2d {
            in_channels: inp,
            out_channels: out,
            kernel_size: [k, k],
            geometry,
            weight: w,
            bias: Some(b),
        });
    }

    fn batchnorm(&mut self, channels: usize) {
        let names = ["mean", "var", "gamma", "beta"].map(|n| self.name(n));
        self.weights.insert(names[0].clone(), Tensor::zeros(&[channels]));
        self.weights.insert(names[1].clone(), Tensor::ones(&[channels]));
        self.weights.insert(names[2].clone(), Tensor::ones(&[channels]));
        self.weights.insert(names[3].clone(), Tensor::zeros(&[channels]));
        let [mean, var, gamma, beta] = names;
        self.layers.push(LayerSpec::Batchnorm {
            channels,
            eps: 1e-5,
            mean,
            var,
            gamma,
            beta,
        });
    }

    fn push(&mut self, layer: LayerSpec) {
        self.layers.push(layer);
    }

    fn finish(self, spec: impl FnOnce(Vec<LayerSpec>) -> NetworkSpec) -> Result<Network> {
        Network::new(spec(self.layers), self.weights)
    }
}

/// Sets every batch-norm layer's running statistics to the per-channel mean
/// and variance observed on `samples` generator inputs.
fn fit_batchnorm(mut net: Network, samples: &Tensor) -> Result<Network> {
    let layers = net.spec().layers.clone();
    let mut x = samples.clone();
    for layer in &layers {
        if let LayerSpec::Batchnorm { mean, var, .. } = layer {
            let (m, v) = channel_moments(&x);
            let (spec, mut weights) = net.into_parts();
            weights.insert(mean.clone(), m);
            weights.insert(var.clone(), v);
            net = Network::new(spec, weights)?;
        }
        x = net.layer_tensor(layer, &x)?;
    }
    Ok(net)
}

fn channel_moments(x: &Tensor) -> (Tensor, Tensor) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane: usize = x.shape()[2..].iter().product();
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let vals = (0..n).flat_map(|b| {
            let start = (b * c + ch) * plane;
            x.data()[start..start + plane].iter().map(|&v| f64::from(v))
        });
        let (s, q) = vals.fold((0.0, 0.0), |(s, q), v| (s + v, q + v * v));
        let m = s / count;
        mean[ch] = m as f32;
        var[ch] = ((q / count - m * m).max(0.0) + 1e-3) as f32;
    }
    (Tensor::from_vec(mean), Tensor::from_vec(var))
}

/// MNIST-shaped generator: `z ∈ R^128 -> [1, 28, 28]` pixels in `(0, 1)`.
pub fn mnist_generator(seed: u64) -> Result<Network> {
    let leaky = LayerSpec::Activation {
        function: ActivationKind::LEAKY_RELU_DEFAULT,
    };
    let dropout = LayerSpec::DropoutIdentity { p: 0.35 };
    let up = ConvGeometry::new(2, 2);

    let mut b = Builder::new(seed);
    b.dense(MNIST_LATENT_DIM, 64, 1.0); // 1
    b.push(LayerSpec::Activation {
        function: ActivationKind::Relu,
    }); // 2
    b.push(LayerSpec::Reshape { shape: vec![4, 4, 4] }); // 3
    b.conv_t(4, 32, 5, up); // 4: 4x4 -> 7x7
    b.batchnorm(32);
    b.push(leaky.clone());
    b.push(dropout.clone());
    b.conv_t(32, 8, 5, up.with_output_padding(1)); // 8: 7x7 -> 14x14
    b.batchnorm(8);
    b.push(leaky.clone());
    b.push(dropout.clone());
    b.conv_t(8, 4, 5, up.with_output_padding(1)); // 12: 14x14 -> 28x28
    b.batchnorm(4);
    b.push(leaky);
    b.push(dropout);
    b.push(LayerSpec::Reshape {
        shape: vec![4 * 28 * 28],
    });
    b.dense(4 * 28 * 28, 784, 1.5);
    b.push(LayerSpec::Activation {
        function: ActivationKind::Sigmoid,
    });
    b.push(LayerSpec::Reshape { shape: vec![1, 28, 28] });

    let net = b.finish(|layers| NetworkSpec {
        name: format!("mnist-generator-{seed}"),
        role: Role::Generator,
        latent_dim: Some(MNIST_LATENT_DIM),
        class_count: None,
        input_shape: vec![MNIST_LATENT_DIM],
        layers,
        injection_points: MNIST_INJECTION_POINTS.to_vec(),
    })?;
    fit_batchnorm(net, &sample_latents(128, MNIST_LATENT_DIM, seed ^ 0x5eed))
}

/// Small convolutional classifier for `[1, 28, 28]` inputs with ten outputs.
pub fn mnist_classifier(seed: u64) -> Result<Network> {
    let relu = LayerSpec::Activation {
        function: ActivationKind::Relu,
    };
    let mut b = Builder::new(seed);
    b.conv(1, 8, 5, ConvGeometry::new(2, 2)); // 28 -> 14
    b.push(relu.clone());
    b.conv(8, 16, 5, ConvGeometry::new(2, 2)); // 14 -> 7
    b.push(relu.clone());
    b.push(LayerSpec::Reshape {
        shape: vec![16 * 7 * 7],
    });
    b.dense(16 * 7 * 7, 64, 2f32.sqrt());
    b.push(relu);
    b.dense(64, MNIST_CLASSES, 1.0);
    b.finish(|layers| NetworkSpec {
        name: format!("mnist-classifier-{seed}"),
        role: Role::Classifier,
        latent_dim: None,
        class_count: Some(MNIST_CLASSES),
        input_shape: vec![1, 28, 28],
        layers,
        injection_points: vec![],
    })
}

/// Shifts the classifier's final bias so that its mean logits over images
/// from `generator` are zero. A raw random classifier tends to send every
/// generated image to the same label; centering spreads the predictions.
pub fn center_classifier(classifier: Network, generator: &Network, samples: usize, seed: u64) -> Result<Network> {
    let latent = generator.spec().input_shape[0];
    let images = generator.forward_plain(&sample_latents(samples, latent, seed))?;
    let logits = classifier.forward_plain(&images)?;
    let classes = logits.shape()[1];
    let (spec, mut weights) = classifier.into_parts();
    let Some(LayerSpec::Dense { bias, .. }) = spec.layers.iter().rev().find(|l| !l.weight_shapes().is_empty()) else {
        return Err(crate::error::Error::InvalidArgument(
            "classifier must end in a dense layer to be centered".into(),
        ));
    };
    let mut b = weights[bias].clone();
    for (k, v) in b.data_mut().iter_mut().enumerate() {
        let mean = (0..samples).map(|n| f64::from(logits.data()[n * classes + k])).sum::<f64>() / samples as f64;
        *v -= mean as f32;
    }
    weights.insert(bias.clone(), b);
    Network::new(spec, weights)
}

/// Generator that passes `z ∈ R^m` through unchanged, perturbable at the
/// input only.
pub fn identity_generator(latent_dim: usize) -> Result<Network> {
    Network::new(
        NetworkSpec {
            name: "identity".into(),
            role: Role::Generator,
            latent_dim: Some(latent_dim),
            class_count: None,
            input_shape: vec![latent_dim],
            layers: vec![LayerSpec::DropoutIdentity { p: 0.0 }],
            injection_points: vec![0],
        },
        Weights::new(),
    )
}

/// Single dense layer classifier with the given `[classes, inputs]` weight
/// and bias.
pub fn linear_classifier(weight: Tensor, bias: Tensor) -> Result<Network> {
    let (classes, inputs) = (weight.shape()[0], weight.shape()[1]);
    let mut weights = Weights::new();
    weights.insert("fc.weight".into(), weight);
    weights.insert("fc.bias".into(), bias);
    Network::new(
        NetworkSpec {
            name: "linear".into(),
            role: Role::Classifier,
            latent_dim: None,
            class_count: Some(classes),
            input_shape: vec![inputs],
            layers: vec![LayerSpec::Dense {
                in_features: inputs,
                out_features: classes,
                weight: "fc.weight".into(),
                bias: "fc.bias".into(),
            }],
            injection_points: vec![],
        },
        weights,
    )
}
