//! Targeted perturbation search.
//!
//! The search minimises the Carlini-Wagner margin `max_j f_j - f_t` of the
//! classifier output on the perturbed generator image with Adam, projecting
//! the raw perturbation variables onto a Euclidean ball after every step and
//! growing that ball (`bound * multiplier + increment`) until the classifier
//! outputs the target label.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{InjectionMask, Network, PerturbationSet};
use crate::sigma::SigmaProfile;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub initial_bound: f64,
    pub bound_multiplier: f64,
    pub bound_increment: f64,
    pub max_steps: usize,
    /// Hard cap on the constraint radius; the search gives up once the
    /// relaxed bound would exceed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_bound: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::imagenet()
    }
}

impl AttackConfig {
    /// Large-generator schedule: lr 0.03, bound 1.0, `* 1.03 + 0.1` per step.
    pub fn imagenet() -> Self {
        Self {
            learning_rate: 0.03,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            initial_bound: 1.0,
            bound_multiplier: 1.03,
            bound_increment: 0.1,
            max_steps: 2000,
            max_bound: None,
        }
    }

    /// Small-generator schedule: lr 0.004, bound 0.1, `+ 0.001` per step.
    pub fn mnist() -> Self {
        Self {
            learning_rate: 0.004,
            initial_bound: 0.1,
            bound_multiplier: 1.0,
            bound_increment: 0.001,
            ..Self::imagenet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.initial_bound > 0.0) {
            return bad("initial_bound must be > 0");
        }
        if !(self.bound_multiplier >= 1.0) {
            return bad("bound_multiplier must be >= 1");
        }
        if !(self.bound_increment >= 0.0) {
            return bad("bound_increment must be >= 0");
        }
        if self.max_steps < 1 {
            return bad("max_steps must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if let Some(m) = self.max_bound {
            if !(m >= self.initial_bound) {
                return bad("max_bound must be >= initial_bound");
            }
        }
        Ok(())
    }

    /// Short stable hash of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// `ℓ(output, t) = max_j output_j - output_t`. Zero exactly when `t` attains
/// the maximum.
pub fn cw_loss(output: &[f32], target: usize) -> f32 {
    let max = output.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    max - output[target]
}

/// One relaxation of the constraint radius.
pub fn relax_bound(bound: f64, config: &AttackConfig) -> f64 {
    bound * config.bound_multiplier + config.bound_increment
}

/// Rescales the active tensors so that the flat norm is at most `bound`.
/// Sets already inside the ball are left untouched.
pub fn project_norm(perts: &mut PerturbationSet, bound: f64) {
    let norm = perts.flat_norm();
    if norm <= bound {
        return;
    }
    let mut scale = bound / norm;
    let original: Vec<(usize, Vec<f32>)> = perts
        .active_tensors_mut()
        .map(|(i, t)| (i, t.data().to_vec()))
        .collect();
    loop {
        for (i, t) in perts.active_tensors_mut() {
            let src = &original.iter().find(|(j, _)| *j == i).expect("same ordinals").1;
            for (dst, &v) in t.data_mut().iter_mut().zip(src) {
                *dst = (f64::from(v) * scale) as f32;
            }
        }
        // f32 rounding can leave the norm a hair above the bound.
        if perts.flat_norm() <= bound {
            break;
        }
        scale *= 1.0 - f64::from(f32::EPSILON);
    }
}

/// Adam moment estimates for the active perturbation tensors.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(perts: &PerturbationSet) -> Self {
        let sizes: Vec<usize> = perts.tensors().iter().map(Tensor::numel).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, perts: &mut PerturbationSet, grads: &[(usize, Tensor)], cfg: &AttackConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut active: Vec<(usize, &mut Tensor)> = perts.active_tensors_mut().collect();
        for (ord, g) in grads {
            let (_, p) = active.iter_mut().find(|(i, _)| i == ord).expect("gradient for active point");
            let (m, v) = (&mut self.m[*ord], &mut self.v[*ord]);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// A sampled `(y, z, t)` attack instance. `z` is a deterministic function of
/// `seed`, so a tuple can be rebuilt from `(id, seed, y, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuple {
    pub id: usize,
    pub seed: u64,
    pub y: usize,
    pub t: usize,
    pub z: Tensor,
}

impl Tuple {
    /// Rebuilds a tuple, regenerating `z` from its seed.
    pub fn from_parts(id: usize, seed: u64, y: usize, t: usize, latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[1, latent_dim], 1.0, &mut rng);
        Self { id, seed, y, t, z }
    }

    /// Same latent, new intended label `y`. The target is kept unless it
    /// collides with `y`, in which case it is redrawn uniformly from the
    /// remaining labels on a separate stream of the tuple's seed.
    pub fn relabeled(&self, y: usize, class_count: usize) -> Self {
        let t = if self.t != y {
            self.t
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1);
            draw_other(&mut rng, y, class_count)
        };
        Self {
            y,
            t,
            ..self.clone()
        }
    }
}

fn draw_other<R: Rng>(rng: &mut R, exclude: usize, class_count: usize) -> usize {
    let t = rng.random_range(0..class_count - 1);
    if t >= exclude {
        t + 1
    } else {
        t
    }
}

/// Samples `count` tuples with `z ~ N(0, I_m)`, `y` uniform and `t` uniform
/// over labels other than `y`. The list depends only on the arguments.
pub fn sample_tuples(class_count: usize, latent_dim: usize, count: usize, seed: u64) -> Result<Vec<Tuple>> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two labels, got {class_count}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|id| {
            let tuple_seed = master.next_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(tuple_seed);
            let z = Tensor::randn(&[1, latent_dim], 1.0, &mut rng);
            let y = rng.random_range(0..class_count);
            let t = draw_other(&mut rng, y, class_count);
            Tuple {
                id,
                seed: tuple_seed,
                y,
                t,
                z,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    SkippedMisclassified,
    Success,
    Exhausted,
}

/// Outcome of attacking one tuple with one classifier and layer subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub tuple_id: usize,
    pub seed: u64,
    pub y: usize,
    pub t: usize,
    pub status: AttackStatus,
    /// Flat norm of the raw perturbation at first success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_magnitude: Option<f64>,
    pub steps_taken: usize,
    pub final_bound: f64,
    pub layer_subset: String,
    pub classifier: String,
    pub config_hash: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl AttackRecord {
    /// Identifier of the perturbed image this record produced.
    pub fn image_id(&self) -> String {
        format!("{}.{}.{}", self.classifier, self.layer_subset, self.tuple_id)
    }
}

/// Everything a search needs besides the tuple.
pub struct AttackSetup<'a> {
    pub generator: &'a Network,
    pub classifier: &'a Network,
    pub sigma: &'a SigmaProfile,
    pub mask: &'a InjectionMask,
    pub config: &'a AttackConfig,
    /// Stored on records to identify the classifier and subset.
    pub classifier_name: &'a str,
    pub layer_subset: &'a str,
    pub config_hash: &'a str,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub record: AttackRecord,
    /// The perturbation at the last evaluated step (`p*` on success).
    pub perturbation: PerturbationSet,
}

impl AttackSetup<'_> {
    fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.sigma.check_against(self.generator)?;
        let out = self.generator.spec().output_shape()?;
        if out != self.classifier.spec().input_shape {
            return Err(Error::ShapeMismatch {
                op: "generator output vs classifier input",
                expected: self.classifier.spec().input_shape.clone(),
                actual: out,
            });
        }
        if self.mask.len() != self.generator.spec().injection_points.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} injection points, generator has {}",
                self.mask.len(),
                self.generator.spec().injection_points.len()
            )));
        }
        if self.mask.active_count() == 0 {
            return Err(Error::InvalidArgument("layer subset enables no injection point".into()));
        }
        Ok(())
    }

    /// Runs the search for one tuple.
    pub fn attack(&self, tuple: &Tuple) -> Result<AttackOutcome> {
        self.check()?;
        let class_count = self.classifier.spec().class_count.unwrap_or(0);
        if tuple.y == tuple.t || tuple.t >= class_count || tuple.y >= class_count {
            return Err(Error::InvalidArgument(format!(
                "tuple {} has y = {}, t = {} with {class_count} classes",
                tuple.id, tuple.y, tuple.t
            )));
        }

        let mut record = AttackRecord {
            tuple_id: tuple.id,
            seed: tuple.seed,
            y: tuple.y,
            t: tuple.t,
            status: AttackStatus::Exhausted,
            success_magnitude: None,
            steps_taken: 0,
            final_bound: self.config.initial_bound,
            layer_subset: self.layer_subset.to_string(),
            classifier: self.classifier_name.to_string(),
            config_hash: self.config_hash.to_string(),
            version: crate::VERSION.to_string(),
            diagnostic: None,
        };
        let mut perts = PerturbationSet::for_spec(self.generator.spec(), self.mask.clone())?;

        let image = self.generator.forward_plain(&tuple.z)?;
        if self.classifier.predict(&image)?.label != tuple.y {
            record.status = AttackStatus::SkippedMisclassified;
            return Ok(AttackOutcome {
                record,
                perturbation: perts,
            });
        }

        let classifier_sigma = SigmaProfile::ones(&self.classifier.spec().injection_shapes()?);
        let classifier_slots = vec![None; classifier_sigma.len()];
        let mut adam = Adam::new(&perts);
        let mut bound = self.config.initial_bound;

        for step in 0..=self.config.max_steps {
            let mut g = Graph::new();
            let z = g.constant_ref(&tuple.z);
            let slots: Vec<Option<Var>> = perts
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, p)| perts.mask().is_active(i).then(|| g.param(p.clone())))
                .collect();
            let x = self.generator.forward_graph(&mut g, z, &slots, self.sigma)?;
            let out = self.classifier.forward_graph(&mut g, x, &classifier_slots, &classifier_sigma)?;

            let (predicted, width) = {
                let output = g.value(out);
                (argmax(output.data()), output.numel())
            };
            if predicted == tuple.t {
                debug_assert!(step > 0, "unperturbed image already predicted as target");
                record.status = AttackStatus::Success;
                record.success_magnitude = Some(perts.flat_norm());
                break;
            }
            let over_cap = self.config.max_bound.is_some_and(|cap| bound > cap);
            if step == self.config.max_steps || over_cap {
                break;
            }

            let flat = g.reshape(out, &[width])?;
            let top = g.max_all(flat)?;
            let target = g.select(flat, tuple.t)?;
            let loss = g.sub(top, target)?;
            if !g.value(loss).is_finite() {
                record.diagnostic = Some(format!("non-finite loss at step {step}"));
                break;
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<(usize, Tensor)> = slots
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.map(|v| (i, grads.take(v).expect("param gradient"))))
                .collect();
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                record.diagnostic = Some(format!("non-finite gradient at step {step}"));
                break;
            }

            adam.step(&mut perts, &grads, self.config);
            project_norm(&mut perts, bound);
            bound = relax_bound(bound, self.config);
            record.steps_taken = step + 1;
            record.final_bound = bound;
        }

        Ok(AttackOutcome {
            record,
            perturbation: perts,
        })
    }

    /// Re-runs the search behind a stored record.
    pub fn replay(&self, record: &AttackRecord) -> Result<AttackOutcome> {
        let latent_dim = self.generator.spec().input_shape[0];
        let tuple = Tuple::from_parts(record.tuple_id, record.seed, record.y, record.t, latent_dim);
        self.attack(&tuple)
    }
}

/// Replaces a tuple's intended label with the classifier's prediction on the
/// unperturbed image, for generators without class conditioning.
pub fn label_from_prediction(tuple: &Tuple, generator: &Network, classifier: &Network) -> Result<Tuple> {
    let image = generator.forward_plain(&tuple.z)?;
    let label = classifier.predict(&image)?.label;
    let class_count = classifier.spec().class_count.unwrap_or(0);
    Ok(tuple.relabeled(label, class_count))
}
