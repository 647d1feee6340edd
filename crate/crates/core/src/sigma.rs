//! Per-neuron activation scales measured from unperturbed samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, Role};
use crate::tensor::Tensor;

pub const DEFAULT_FLOOR: f32 = 1e-6;
pub const DEFAULT_SAMPLES: usize = 256;

/// Latent vectors are pushed through the generator in batches of this size.
const CALIBRATION_BATCH: usize = 32;

/// Empirical standard deviation tensor for each injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaProfile {
    sigmas: Vec<Tensor>,
    meta: SigmaMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaMeta {
    pub sample_count: usize,
    pub seed: u64,
    pub floor: f32,
}

impl SigmaProfile {
    pub fn new(sigmas: Vec<Tensor>, sample_count: usize, seed: u64, floor: f32) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma floor must be positive, got {floor}")));
        }
        if let Some(bad) = sigmas.iter().flat_map(|t| t.data()).find(|&&v| !(v >= floor)) {
            return Err(Error::InvalidArgument(format!(
                "sigma entry {bad} below floor {floor}"
            )));
        }
        Ok(Self {
            sigmas,
            meta: SigmaMeta {
                sample_count,
                seed,
                floor,
            },
        })
    }

    /// Unit scales, i.e. perturbations are added unscaled.
    pub fn ones(shapes: &[Vec<usize>]) -> Self {
        Self {
            sigmas: shapes.iter().map(|s| Tensor::ones(s)).collect(),
            meta: SigmaMeta {
                sample_count: 0,
                seed: 0,
                floor: DEFAULT_FLOOR,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn tensor(&self, ordinal: usize) -> &Tensor {
        &self.sigmas[ordinal]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.sigmas
    }

    pub fn meta(&self) -> SigmaMeta {
        self.meta
    }

    /// Checks shapes against a network's injection points.
    pub fn check_against(&self, network: &Network) -> Result<()> {
        let shapes = network.spec().injection_shapes()?;
        if shapes.len() != self.sigmas.len() {
            return Err(Error::InvalidArgument(format!(
                "sigma profile has {} tensors but `{}` has {} injection points",
                self.sigmas.len(),
                network.spec().name,
                shapes.len()
            )));
        }
        for (t, s) in self.sigmas.iter().zip(&shapes) {
            t.expect_shape("sigma", s)?;
        }
        Ok(())
    }
}

/// Draws `count` standard-normal latent vectors of dimension `dim`.
pub fn sample_latents(count: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[count, dim], 1.0, &mut rng)
}

/// Running sums for one injection point.
#[derive(Clone)]
struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
        }
    }

    fn merge(&mut self, other: &Moments) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }
}

/// Population standard deviation from a sum and sum of squares over `count`
/// values.
fn population_std(sum: f64, sum_sq: f64, count: f64) -> f64 {
    let mean = sum / count;
    (sum_sq / count - mean * mean).max(0.0).sqrt()
}

/// Measures the population standard deviation of every activation at every
/// injection point over `num_samples` unperturbed generator passes with
/// `z ~ N(0, I)`, clamped below at `floor`.
///
/// Batches are evaluated in parallel and reduced in batch order, so the result
/// depends only on `(generator, num_samples, seed, floor)`.
pub fn calibrate(generator: &Network, num_samples: usize, seed: u64, floor: f32) -> Result<SigmaProfile> {
    let spec = generator.spec();
    if spec.role != Role::Generator {
        return Err(Error::InvalidArgument(format!("`{}` is not a generator", spec.name)));
    }
    if num_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 2 samples, got {num_samples}"
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma floor must be positive, got {floor}")));
    }
    let latent_dim = spec.input_shape[0];
    let shapes = spec.injection_shapes()?;
    let per_sample: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let latents = sample_latents(num_samples, latent_dim, seed);

    let batches: Vec<(usize, usize)> = (0..num_samples)
        .step_by(CALIBRATION_BATCH)
        .map(|start| (start, (start + CALIBRATION_BATCH).min(num_samples)))
        .collect();

    let partials: Vec<Vec<Moments>> = batches
        .par_iter()
        .map(|&(start, end)| {
            let z = Tensor::new(
                vec![end - start, latent_dim],
                latents.data()[start * latent_dim..end * latent_dim].to_vec(),
            )?;
            let trace = generator.forward_traced(&z, None)?;
            trace
                .injected
                .iter()
                .zip(&per_sample)
                .enumerate()
                .map(|(ord, (act, &n))| {
                    if !act.is_finite() {
                        return Err(Error::NonFinite {
                            boundary: spec.injection_points[ord],
                        });
                    }
                    let mut m = Moments::new(n);
                    for row in act.data().chunks(n) {
                        for ((s, q), &v) in m.sum.iter_mut().zip(m.sum_sq.iter_mut()).zip(row) {
                            let v = f64::from(v);
                            *s += v;
                            *q += v * v;
                        }
                    }
                    Ok(m)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut total: Vec<Moments> = per_sample.iter().map(|&n| Moments::new(n)).collect();
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }

    let count = num_samples as f64;
    let sigmas = total
        .iter()
        .zip(&shapes)
        .map(|(m, shape)| {
            let data = m
                .sum
                .iter()
                .zip(&m.sum_sq)
                .map(|(&s, &q)| (population_std(s, q, count) as f32).max(floor))
                .collect();
            Tensor::new(shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    SigmaProfile::new(sigmas, num_samples, seed, floor)
}
