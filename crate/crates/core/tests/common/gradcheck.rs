//! Analytic gradients from the engine versus central differences of the f64
//! reference.

#![allow(dead_code)]

use latprobe_core::graph::{Graph, Var};
use latprobe_core::network::{Network, PerturbationSet};
use latprobe_core::{SigmaProfile, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, Arr};

pub const SAMPLED_COORDS: usize = 100;

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub checked: usize,
    pub passed: usize,
    /// Largest `|a - n| / max(|a|, |n|, floor)` seen.
    pub worst: f64,
    /// Coordinates whose analytic gradient is not exactly zero.
    pub nonzero: usize,
}

impl CaseReport {
    pub fn ok(&self) -> bool {
        self.nonzero > 0 && self.passed * 100 >= 95 * self.checked
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {}/{} coordinates within tolerance, {} nonzero (worst rel err {:.2e})",
            self.name, self.passed, self.checked, self.nonzero, self.worst
        )
    }
}

fn pick(total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if total <= SAMPLED_COORDS {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, SAMPLED_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

fn tally(name: &str, pairs: impl Iterator<Item = (f64, f64)>) -> CaseReport {
    let mut rep = CaseReport {
        name: name.to_string(),
        checked: 0,
        passed: 0,
        worst: 0.0,
        nonzero: 0,
    };
    for (a, n) in pairs {
        rep.checked += 1;
        rep.nonzero += usize::from(a != 0.0);
        if r::grad_close(a, n) {
            rep.passed += 1;
        }
        let scale = a.abs().max(n.abs()).max(r::ABS_FLOOR);
        rep.worst = rep.worst.max((a - n).abs() / scale);
    }
    rep
}

/// Checks every input of one op. The scalar loss is `sum(w * op(inputs))`
/// for a fixed random `w`, so every output element contributes.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> latprobe_core::Result<Var>,
    reference: impl Fn(&[Arr]) -> Arr,
    seed: u64,
) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let weights = Tensor::randn(g.value(out).shape(), 1.0, &mut rng);
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let w64 = Arr::from_tensor(&weights);
    let base: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
    let sizes: Vec<usize> = base.iter().map(|a| a.data.len()).collect();
    let total: usize = sizes.iter().sum();

    let pairs: Vec<(f64, f64)> = pick(total, &mut rng)
        .into_iter()
        .map(|flat| {
            let (mut which, mut idx) = (0, flat);
            while idx >= sizes[which] {
                idx -= sizes[which];
                which += 1;
            }
            let analytic = f64::from(grads.get(vars[which]).unwrap().data()[idx]);
            let mut f = |x: &[f64]| {
                let mut args = base.clone();
                args[which].data.copy_from_slice(x);
                let y = reference(&args);
                y.data.iter().zip(&w64.data).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = r::central_diff(&mut f, &base[which].data, idx, r::FD_STEP);
            (analytic, numeric)
        })
        .collect();
    tally(name, pairs.into_iter())
}

/// CW loss of `classifier(generator(z; p))` for target `t`, differentiated
/// with respect to every active perturbation tensor.
pub fn check_composite(
    name: &str,
    generator: &Network,
    classifier: &Network,
    sigma: &SigmaProfile,
    z: &Tensor,
    perts: &PerturbationSet,
    t: usize,
    seed: u64,
) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut g = Graph::new();
    let zv = g.constant_ref(z);
    let slots: Vec<Option<Var>> = perts
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, p)| perts.mask().is_active(i).then(|| g.param(p.clone())))
        .collect();
    let x = generator.forward_graph(&mut g, zv, &slots, sigma).unwrap();
    let csigma = SigmaProfile::ones(&[]);
    let out = classifier.forward_graph(&mut g, x, &[], &csigma).unwrap();
    let width = g.value(out).numel();
    let flat = g.reshape(out, &[width]).unwrap();
    let top = g.max_all(flat).unwrap();
    let tv = g.select(flat, t).unwrap();
    let loss = g.sub(top, tv).unwrap();
    let grads = g.backward(loss).unwrap();

    let active: Vec<usize> = (0..perts.len()).filter(|&i| perts.mask().is_active(i)).collect();
    let base: Vec<Arr> = perts.tensors().iter().map(Arr::from_tensor).collect();
    let sigma64: Vec<Arr> = sigma.tensors().iter().map(Arr::from_tensor).collect();
    let z64 = Arr::from_tensor(z);
    let sizes: Vec<usize> = active.iter().map(|&i| base[i].data.len()).collect();
    let total: usize = sizes.iter().sum();

    let eval = |ps: &[Arr]| -> f64 {
        let slots: Vec<Option<Arr>> = (0..ps.len())
            .map(|i| perts.mask().is_active(i).then(|| ps[i].clone()))
            .collect();
        let img = r::forward(generator.spec(), generator.weights(), &z64, &slots, &sigma64);
        let logits = r::forward(classifier.spec(), classifier.weights(), &img, &[], &[]);
        r::cw(&logits.data, t)
    };

    let pairs: Vec<(f64, f64)> = pick(total, &mut rng)
        .into_iter()
        .map(|flat| {
            let (mut k, mut idx) = (0, flat);
            while idx >= sizes[k] {
                idx -= sizes[k];
                k += 1;
            }
            let ord = active[k];
            let analytic = f64::from(grads.get(slots[ord].unwrap()).unwrap().data()[idx]);
            let mut f = |x: &[f64]| {
                let mut ps = base.clone();
                ps[ord].data.copy_from_slice(x);
                eval(&ps)
            };
            (analytic, r::central_diff(&mut f, &base[ord].data, idx, r::FD_STEP))
        })
        .collect();
    tally(name, pairs.into_iter())
}
