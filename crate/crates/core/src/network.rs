//! Sequential generator and classifier networks with perturbation injection
//! points.
//!
//! A network is an ordered list of [`LayerSpec`]s. Boundary `0` is the
//! network input and boundary `i` is the output of layer `i` (1-based), so a
//! perturbation at boundary `i` is added after layer `i` and before layer
//! `i + 1` consumes it. The archive declares which boundaries accept
//! perturbations; nothing here infers them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{self, ActivationKind, BatchNormParams, ConvGeometry, ElementwiseKind};
use crate::sigma::SigmaProfile;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: String,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: [usize; 2],
        #[serde(flatten)]
        geometry: ConvGeometry,
        weight: String,
        #[serde(default)]
        bias: Option<String>,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: [usize; 2],
        #[serde(flatten)]
        geometry: ConvGeometry,
        weight: String,
        #[serde(default)]
        bias: Option<String>,
    },
    Batchnorm {
        channels: usize,
        eps: f32,
        mean: String,
        var: String,
        gamma: String,
        beta: String,
    },
    Activation {
        function: ActivationKind,
    },
    /// Reshape to a per-sample shape; the batch dimension is kept.
    Reshape {
        shape: Vec<usize>,
    },
    UpsampleNearest {
        factor: usize,
    },
    /// Dropout at inference time: the identity map.
    DropoutIdentity {
        p: f32,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "dense",
            Self::Conv2d { .. } => "conv2d",
            Self::ConvTranspose2d { .. } => "conv_transpose2d",
            Self::Batchnorm { .. } => "batchnorm",
            Self::Activation { .. } => "activation",
            Self::Reshape { .. } => "reshape",
            Self::UpsampleNearest { .. } => "upsample_nearest",
            Self::DropoutIdentity { .. } => "dropout_identity",
        }
    }

    /// Named weight tensors and the shapes this layer requires of them.
    pub fn weight_shapes(&self) -> Vec<(&str, Vec<usize>)> {
        match self {
            Self::Dense {
                in_features,
                out_features,
                weight,
                bias,
            } => vec![
                (weight.as_str(), vec![*out_features, *in_features]),
                (bias.as_str(), vec![*out_features]),
            ],
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel_size: [kh, kw],
                weight,
                bias,
                ..
            } => {
                let mut v = vec![(weight.as_str(), vec![*out_channels, *in_channels, *kh, *kw])];
                v.extend(bias.as_deref().map(|b| (b, vec![*out_channels])));
                v
            }
            Self::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel_size: [kh, kw],
                weight,
                bias,
                ..
            } => {
                let mut v = vec![(weight.as_str(), vec![*in_channels, *out_channels, *kh, *kw])];
                v.extend(bias.as_deref().map(|b| (b, vec![*out_channels])));
                v
            }
            Self::Batchnorm {
                channels,
                mean,
                var,
                gamma,
                beta,
                ..
            } => [mean, var, gamma, beta]
                .into_iter()
                .map(|n| (n.as_str(), vec![*channels]))
                .collect(),
            Self::Activation { .. }
            | Self::Reshape { .. }
            | Self::UpsampleNearest { .. }
            | Self::DropoutIdentity { .. } => vec![],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let numel: usize = input.iter().product();
        match self {
            Self::Dense {
                in_features,
                out_features,
                ..
            } => {
                if input != [*in_features] {
                    return Err(format!("expects [{in_features}], got {input:?}"));
                }
                Ok(vec![*out_features])
            }
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel_size: [kh, kw],
                geometry,
                ..
            } => {
                let [c, h, w] = chw(input)?;
                if c != *in_channels {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                let (oh, ow) = ops::conv2d_out_hw(*geometry, h, w, *kh, *kw).map_err(|e| e.to_string())?;
                Ok(vec![*out_channels, oh, ow])
            }
            Self::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel_size: [kh, kw],
                geometry,
                ..
            } => {
                let [c, h, w] = chw(input)?;
                if c != *in_channels {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                let (oh, ow) =
                    ops::conv_transpose2d_out_hw(*geometry, h, w, *kh, *kw).map_err(|e| e.to_string())?;
                Ok(vec![*out_channels, oh, ow])
            }
            Self::Batchnorm { channels, .. } => {
                if input.first() != Some(channels) {
                    return Err(format!("expects {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            Self::Activation { .. } | Self::DropoutIdentity { .. } => Ok(input.to_vec()),
            Self::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel || shape.contains(&0) {
                    return Err(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            Self::UpsampleNearest { factor } => {
                let [c, h, w] = chw(input)?;
                if *factor == 0 {
                    return Err("factor must be positive".into());
                }
                Ok(vec![c, h * factor, w * factor])
            }
        }
    }
}

fn chw(shape: &[usize]) -> std::result::Result<[usize; 3], String> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expects a [channels, height, width] input, got {shape:?}")),
    }
}

/// Architecture description stored in a weight archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub role: Role,
    /// Latent dimension `m` (generators only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Number of output classes (classifiers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    /// Per-sample input shape (no batch dimension).
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Boundary indices accepting perturbations, strictly increasing.
    #[serde(default)]
    pub injection_points: Vec<usize>,
}

impl NetworkSpec {
    /// Per-sample activation shapes at every boundary `0..=layers.len()`.
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|reason| Error::Layer {
                    layer: i + 1,
                    name: layer.kind_name().into(),
                    reason,
                })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Full activation shapes (batch of one) at each injection point.
    pub fn injection_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.boundary_shapes()?;
        Ok(self
            .injection_points
            .iter()
            .map(|&b| with_batch(1, &shapes[b]))
            .collect())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.boundary_shapes()?.pop().expect("non-empty"))
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.boundary_shapes()?;
        if !self.injection_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSpec("injection points must be strictly increasing".into()));
        }
        if let Some(&last) = self.injection_points.last() {
            if last > self.layers.len() {
                return Err(Error::InvalidSpec(format!(
                    "injection point {last} beyond final boundary {}",
                    self.layers.len()
                )));
            }
        }
        let input_numel: usize = self.input_shape.iter().product();
        let output_numel: usize = shapes.last().expect("non-empty").iter().product();
        match self.role {
            Role::Generator => match self.latent_dim {
                Some(m) if self.input_shape == [m] => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "generator latent_dim {:?} must match input shape {:?}",
                        self.latent_dim, self.input_shape
                    )))
                }
            },
            Role::Classifier => match self.class_count {
                Some(k) if k >= 2 && output_numel == k => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "classifier class_count {:?} must be >= 2 and match output size {output_numel}",
                        self.class_count
                    )))
                }
            },
        }
        debug_assert!(input_numel > 0);
        Ok(())
    }

    /// Position of a boundary within `injection_points`.
    pub fn injection_ordinal(&self, boundary: usize) -> Option<usize> {
        self.injection_points.iter().position(|&b| b == boundary)
    }
}

pub(crate) fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(shape.len() + 1);
    v.push(batch);
    v.extend_from_slice(shape);
    v
}

/// Named weight tensors.
pub type Weights = BTreeMap<String, Tensor>;

/// Which injection points a search may perturb, indexed by injection ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionMask(Vec<bool>);

impl InjectionMask {
    pub fn all(count: usize) -> Self {
        Self(vec![true; count])
    }

    pub fn none(count: usize) -> Self {
        Self(vec![false; count])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    /// Mask enabling the listed boundaries of `spec`.
    pub fn from_boundaries(spec: &NetworkSpec, boundaries: &[usize]) -> Result<Self> {
        let mut flags = vec![false; spec.injection_points.len()];
        for &b in boundaries {
            let ord = spec.injection_ordinal(b).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "boundary {b} is not an injection point of `{}` ({:?})",
                    spec.name, spec.injection_points
                ))
            })?;
            flags[ord] = true;
        }
        Ok(Self(flags))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, ordinal: usize) -> bool {
        self.0.get(ordinal).copied().unwrap_or(false)
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }
}

/// One perturbation tensor per injection point, zero wherever the mask
/// excludes that point.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    tensors: Vec<Tensor>,
    mask: InjectionMask,
}

impl PerturbationSet {
    pub fn zeros(shapes: &[Vec<usize>], mask: InjectionMask) -> Result<Self> {
        if shapes.len() != mask.len() {
            return Err(Error::InvalidArgument(format!(
                "{} injection shapes but mask has {} entries",
                shapes.len(),
                mask.len()
            )));
        }
        Ok(Self {
            tensors: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            mask,
        })
    }

    /// Zero perturbation for every injection point of `spec`.
    pub fn for_spec(spec: &NetworkSpec, mask: InjectionMask) -> Result<Self> {
        Self::zeros(&spec.injection_shapes()?, mask)
    }

    pub fn mask(&self) -> &InjectionMask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, ordinal: usize) -> &Tensor {
        &self.tensors[ordinal]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces an active point's tensor. Masked points only accept zeros.
    pub fn set(&mut self, ordinal: usize, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(ordinal)
            .ok_or_else(|| Error::InvalidArgument(format!("no injection ordinal {ordinal}")))?;
        slot.expect_shape("perturbation", value.shape())?;
        if !self.mask.is_active(ordinal) && value.data().iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "injection ordinal {ordinal} is masked and must stay zero"
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Mutable access to the active tensors, in ordinal order.
    pub fn active_tensors_mut(&mut self) -> impl Iterator<Item = (usize, &mut Tensor)> {
        let mask = &self.mask;
        self.tensors
            .iter_mut()
            .enumerate()
            .filter(move |(i, _)| mask.is_active(*i))
    }

    /// Euclidean norm of all active tensors flattened and concatenated.
    pub fn flat_norm(&self) -> f64 {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask.is_active(*i))
            .map(|(_, t)| t.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalars in active tensors.
    pub fn active_numel(&self) -> usize {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask.is_active(*i))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub output: Vec<f32>,
}

/// A network description together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    weights: Weights,
}

impl Network {
    /// Validates the spec and checks every referenced weight's shape.
    pub fn new(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        for (i, layer) in spec.layers.iter().enumerate() {
            for (name, shape) in layer.weight_shapes() {
                let t = weights.get(name).ok_or_else(|| Error::MissingWeight(name.into()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Layer {
                        layer: i + 1,
                        name: layer.kind_name().into(),
                        reason: format!(
                            "weight `{name}` has shape {:?}, expected {shape:?}",
                            t.shape()
                        ),
                    });
                }
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_parts(self) -> (NetworkSpec, Weights) {
        (self.spec, self.weights)
    }

    fn w(&self, name: &str) -> &Tensor {
        // presence and shape checked in `new`
        &self.weights[name]
    }

    fn check_input(&self, input: &[usize]) -> Result<usize> {
        match input.split_first() {
            Some((&batch, rest)) if rest == self.spec.input_shape.as_slice() && batch > 0 => Ok(batch),
            _ => Err(Error::ShapeMismatch {
                op: "network input",
                expected: with_batch(1, &self.spec.input_shape),
                actual: input.to_vec(),
            }),
        }
    }

    pub(crate) fn layer_tensor(&self, layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
        match layer {
            LayerSpec::Dense { weight, bias, .. } => ops::dense(x, self.w(weight), self.w(bias)),
            LayerSpec::Conv2d {
                geometry,
                weight,
                bias,
                ..
            } => ops::conv2d(x, self.w(weight), bias.as_deref().map(|b| self.w(b)), *geometry),
            LayerSpec::ConvTranspose2d {
                geometry,
                weight,
                bias,
                ..
            } => ops::conv_transpose2d(x, self.w(weight), bias.as_deref().map(|b| self.w(b)), *geometry),
            LayerSpec::Batchnorm {
                eps,
                mean,
                var,
                gamma,
                beta,
                ..
            } => ops::batchnorm_inference(
                x,
                BatchNormParams {
                    mean: self.w(mean),
                    var: self.w(var),
                    gamma: self.w(gamma),
                    beta: self.w(beta),
                    eps: *eps,
                },
            ),
            LayerSpec::Activation { function } => Ok(ops::activation(*function, x)),
            LayerSpec::Reshape { shape } => x.reshape(&with_batch(x.shape()[0], shape)),
            LayerSpec::UpsampleNearest { factor } => ops::upsample_nearest(x, *factor),
            LayerSpec::DropoutIdentity { .. } => Ok(x.clone()),
        }
    }

    fn layer_graph<'a>(&'a self, g: &mut Graph<'a>, layer: &LayerSpec, x: Var) -> Result<Var> {
        match layer {
            LayerSpec::Dense { weight, bias, .. } => {
                let w = g.constant_ref(self.w(weight));
                let b = g.constant_ref(self.w(bias));
                g.dense(x, w, b)
            }
            LayerSpec::Conv2d {
                geometry,
                weight,
                bias,
                ..
            } => {
                let k = g.constant_ref(self.w(weight));
                let b = bias.as_deref().map(|b| g.constant_ref(self.w(b)));
                g.conv2d(x, k, b, *geometry)
            }
            LayerSpec::ConvTranspose2d {
                geometry,
                weight,
                bias,
                ..
            } => {
                let k = g.constant_ref(self.w(weight));
                let b = bias.as_deref().map(|b| g.constant_ref(self.w(b)));
                g.conv_transpose2d(x, k, b, *geometry)
            }
            LayerSpec::Batchnorm {
                eps,
                mean,
                var,
                gamma,
                beta,
                ..
            } => {
                let [m, v, ga, be] = [mean, var, gamma, beta].map(|n| g.constant_ref(self.w(n)));
                g.batchnorm(x, m, v, ga, be, *eps)
            }
            LayerSpec::Activation { function } => g.activation(*function, x),
            LayerSpec::Reshape { shape } => {
                let batch = g.value(x).shape()[0];
                g.reshape(x, &with_batch(batch, shape))
            }
            LayerSpec::UpsampleNearest { factor } => g.upsample_nearest(x, *factor),
            LayerSpec::DropoutIdentity { .. } => Ok(x),
        }
    }

    /// Unperturbed forward pass. Contains no injection logic at all.
    pub fn forward_plain(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let mut x = input.clone();
        for layer in &self.spec.layers {
            x = self.layer_tensor(layer, &x)?;
        }
        Ok(x)
    }

    /// Forward pass that adds `p_i ⊙ σ_i` at every active injection point.
    pub fn forward(&self, input: &Tensor, perts: &PerturbationSet, sigma: &SigmaProfile) -> Result<Tensor> {
        Ok(self.forward_traced(input, Some((perts, sigma)))?.output)
    }

    /// Forward pass recording the (post-injection) activation at each
    /// injection point.
    pub fn forward_traced(
        &self,
        input: &Tensor,
        perturbation: Option<(&PerturbationSet, &SigmaProfile)>,
    ) -> Result<Trace> {
        let batch = self.check_input(input.shape())?;
        if let Some((perts, sigma)) = perturbation {
            self.check_perturbation(perts, sigma)?;
            if batch != 1 {
                return Err(Error::InvalidArgument(
                    "perturbed forward passes take a batch of one".into(),
                ));
            }
        }
        let mut injected = Vec::with_capacity(self.spec.injection_points.len());
        let mut x = input.clone();
        let mut inject = |boundary: usize, x: Tensor| -> Result<Tensor> {
            let Some(ord) = self.spec.injection_ordinal(boundary) else {
                return Ok(x);
            };
            let x = match perturbation {
                Some((perts, sigma)) if perts.mask().is_active(ord) => {
                    let scaled = ops::elementwise(ElementwiseKind::Mul, perts.tensor(ord), sigma.tensor(ord))?;
                    ops::elementwise(ElementwiseKind::Add, &x, &scaled)?
                }
                _ => x,
            };
            injected.push(x.clone());
            Ok(x)
        };
        x = inject(0, x)?;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = self.layer_tensor(layer, &x)?;
            x = inject(i + 1, x)?;
        }
        Ok(Trace { injected, output: x })
    }

    /// Records the perturbed forward pass on `g`. `perts[ordinal]` is the
    /// graph variable for that injection point, or `None` when inactive.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        input: Var,
        perts: &[Option<Var>],
        sigma: &'a SigmaProfile,
    ) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        if perts.len() != self.spec.injection_points.len() || sigma.len() != perts.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} perturbation slots and sigma tensors, got {} and {}",
                self.spec.injection_points.len(),
                perts.len(),
                sigma.len()
            )));
        }
        let inject = |g: &mut Graph<'a>, boundary: usize, x: Var| -> Result<Var> {
            match self.spec.injection_ordinal(boundary).and_then(|o| perts[o].map(|p| (o, p))) {
                Some((ord, p)) => {
                    let s = g.constant_ref(sigma.tensor(ord));
                    let scaled = g.mul(p, s)?;
                    g.add(x, scaled)
                }
                None => Ok(x),
            }
        };
        let mut x = inject(g, 0, input)?;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = self.layer_graph(g, layer, x)?;
            x = inject(g, i + 1, x)?;
        }
        Ok(x)
    }

    fn check_perturbation(&self, perts: &PerturbationSet, sigma: &SigmaProfile) -> Result<()> {
        let shapes = self.spec.injection_shapes()?;
        if perts.len() != shapes.len() || sigma.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "network has {} injection points; got {} perturbations and {} sigma tensors",
                shapes.len(),
                perts.len(),
                sigma.len()
            )));
        }
        for (i, shape) in shapes.iter().enumerate() {
            perts.tensor(i).expect_shape("perturbation", shape)?;
            sigma.tensor(i).expect_shape("sigma", shape)?;
        }
        Ok(())
    }

    /// Classifies a single image: argmax of the raw output, lowest index on
    /// ties.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        if image.shape().first() != Some(&1) {
            return Err(Error::ShapeMismatch {
                op: "predict",
                expected: with_batch(1, &self.spec.input_shape),
                actual: image.shape().to_vec(),
            });
        }
        let out = self.forward_plain(image)?;
        Ok(Prediction {
            label: out.argmax(),
            output: out.into_data(),
        })
    }
}

/// Activations observed during [`Network::forward_traced`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Post-injection activation per injection point, in ordinal order.
    pub injected: Vec<Tensor>,
    pub output: Tensor,
}
