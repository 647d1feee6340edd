//! The gradcheck suite: one case per registered op and geometry variant plus
//! full generator/classifier composites.

#![allow(dead_code)]

use latprobe_core::fixtures;
use latprobe_core::network::{InjectionMask, LayerSpec, Network, NetworkSpec, PerturbationSet, Role, Weights};
use latprobe_core::ops::{ActivationKind, ConvGeometry, ElementwiseKind};
use latprobe_core::search::label_from_prediction;
use latprobe_core::sigma::calibrate;
use latprobe_core::{search, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_composite, check_op, CaseReport};
use super::reference::{self as r, Arr};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn op_cases() -> Vec<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let binary: [(&str, ElementwiseKind, fn(&Arr, &Arr) -> Arr); 4] = [
        ("add", ElementwiseKind::Add, r::add),
        ("sub", ElementwiseKind::Sub, r::sub),
        ("mul", ElementwiseKind::Mul, r::mul),
        ("max", ElementwiseKind::Max, r::max),
    ];
    for (i, (name, kind, f)) in binary.into_iter().enumerate() {
        let inputs = [randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)];
        out.push(check_op(name, &inputs, |g, v| g.elementwise(kind, v[0], v[1]), |a| f(&a[0], &a[1]), i as u64));
    }

    let x = randn(&[3, 5], &mut rng);
    out.push(check_op(
        "scale by scalar",
        &[x.clone()],
        |g, v| g.elementwise_scalar(ElementwiseKind::Mul, v[0], -1.7),
        |a| Arr::new(a[0].shape.clone(), a[0].data.iter().map(|v| v * f64::from(-1.7f32)).collect()),
        10,
    ));
    out.push(check_op(
        "max with scalar",
        &[x],
        |g, v| g.elementwise_scalar(ElementwiseKind::Max, v[0], 0.25),
        |a| Arr::new(a[0].shape.clone(), a[0].data.iter().map(|v| v.max(0.25)).collect()),
        11,
    ));

    let dense_in = [
        randn(&[2, 8], &mut rng),
        Tensor::randn(&[8, 8], 0.4, &mut rng),
        randn(&[8], &mut rng),
    ];
    out.push(check_op(
        "dense 8x8",
        &dense_in,
        |g, v| g.dense(v[0], v[1], v[2]),
        |a| r::dense(&a[0], &a[1], &a[2]),
        12,
    ));

    let convs = [
        ("conv2d k3 s1 p1", [2, 3, 6, 6], [4, 3, 3, 3], ConvGeometry::new(1, 1), true),
        ("conv2d k5 s2 p2", [1, 2, 9, 9], [3, 2, 5, 5], ConvGeometry::new(2, 2), true),
        ("conv2d k2 s2 p0 no bias", [2, 2, 6, 5], [3, 2, 2, 2], ConvGeometry::new(2, 0), false),
    ];
    for (i, (name, xs, ks, geom, bias)) in convs.into_iter().enumerate() {
        let mut inputs = vec![randn(&xs, &mut rng), Tensor::randn(&ks, 0.3, &mut rng)];
        if bias {
            inputs.push(randn(&[ks[0]], &mut rng));
        }
        out.push(check_op(
            name,
            &inputs,
            |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), geom),
            |a| r::conv2d(&a[0], &a[1], a.get(2), geom),
            20 + i as u64,
        ));
    }

    let transposed = [
        ("conv_transpose2d k5 s2 p2", [1, 3, 4, 4], [3, 2, 5, 5], ConvGeometry::new(2, 2), true),
        (
            "conv_transpose2d k5 s2 p2 op1",
            [2, 2, 4, 3],
            [2, 3, 5, 5],
            ConvGeometry::new(2, 2).with_output_padding(1),
            true,
        ),
        ("conv_transpose2d k4 s2 p1 no bias", [1, 2, 3, 3], [2, 2, 4, 4], ConvGeometry::new(2, 1), false),
        ("conv_transpose2d k3 s1 p0", [1, 2, 4, 4], [2, 3, 3, 3], ConvGeometry::new(1, 0), true),
    ];
    for (i, (name, xs, ks, geom, bias)) in transposed.into_iter().enumerate() {
        let mut inputs = vec![randn(&xs, &mut rng), Tensor::randn(&ks, 0.3, &mut rng)];
        if bias {
            inputs.push(randn(&[ks[1]], &mut rng));
        }
        out.push(check_op(
            name,
            &inputs,
            |g, v| g.conv_transpose2d(v[0], v[1], v.get(2).copied(), geom),
            |a| r::conv_transpose2d(&a[0], &a[1], a.get(2), geom),
            30 + i as u64,
        ));
    }

    for (i, xs) in [vec![2, 3, 4, 4], vec![4, 5]].into_iter().enumerate() {
        let c = xs[1];
        let inputs = [
            randn(&xs, &mut rng),
            randn(&[c], &mut rng),
            Tensor::uniform(&[c], 0.5, 2.0, &mut rng),
            randn(&[c], &mut rng),
            randn(&[c], &mut rng),
        ];
        out.push(check_op(
            &format!("batchnorm {}d", xs.len()),
            &inputs,
            |g, v| g.batchnorm(v[0], v[1], v[2], v[3], v[4], 1e-5),
            |a| r::batchnorm(&a[0], &a[1], &a[2], &a[3], &a[4], f64::from(1e-5f32)),
            40 + i as u64,
        ));
    }

    let acts = [
        ("relu", ActivationKind::Relu),
        ("leaky relu", ActivationKind::LEAKY_RELU_DEFAULT),
        ("sigmoid", ActivationKind::Sigmoid),
        ("tanh", ActivationKind::Tanh),
    ];
    for (i, (name, kind)) in acts.into_iter().enumerate() {
        out.push(check_op(
            name,
            &[Tensor::randn(&[4, 6], 2.0, &mut rng)],
            |g, v| g.activation(kind, v[0]),
            |a| r::activation(kind, &a[0]),
            50 + i as u64,
        ));
    }

    out.push(check_op(
        "upsample nearest x2",
        &[randn(&[1, 2, 3, 4], &mut rng)],
        |g, v| g.upsample_nearest(v[0], 2),
        |a| r::upsample_nearest(&a[0], 2),
        60,
    ));
    out.push(check_op(
        "reshape",
        &[randn(&[2, 3, 4], &mut rng)],
        |g, v| g.reshape(v[0], &[6, 4]),
        |a| a[0].clone().reshape(&[6, 4]),
        61,
    ));
    out.push(check_op(
        "sum",
        &[randn(&[3, 7], &mut rng)],
        |g, v| g.sum(v[0]),
        |a| Arr::new(vec![1], vec![a[0].data.iter().sum()]),
        62,
    ));
    out.push(check_op(
        "max over all",
        &[randn(&[20], &mut rng)],
        |g, v| g.max_all(v[0]),
        |a| Arr::new(vec![1], vec![a[0].data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)]),
        63,
    ));
    out.push(check_op(
        "select",
        &[randn(&[10], &mut rng)],
        |g, v| g.select(v[0], 7),
        |a| Arr::new(vec![1], vec![a[0].data[7]]),
        64,
    ));
    out
}

/// Three-layer dense generator with perturbations at the latent, the hidden
/// layer and the output.
pub fn small_generator(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::new();
    w.insert("a.w".into(), Tensor::randn(&[12, 6], 0.5, &mut rng));
    w.insert("a.b".into(), Tensor::randn(&[12], 0.1, &mut rng));
    w.insert("b.w".into(), Tensor::randn(&[8, 12], 0.4, &mut rng));
    w.insert("b.b".into(), Tensor::randn(&[8], 0.1, &mut rng));
    w.insert("c.w".into(), Tensor::randn(&[16, 8], 0.4, &mut rng));
    w.insert("c.b".into(), Tensor::randn(&[16], 0.1, &mut rng));
    let dense = |i, o, n: &str| LayerSpec::Dense {
        in_features: i,
        out_features: o,
        weight: format!("{n}.w"),
        bias: format!("{n}.b"),
    };
    let act = |f| LayerSpec::Activation { function: f };
    Network::new(
        NetworkSpec {
            name: "small".into(),
            role: Role::Generator,
            latent_dim: Some(6),
            class_count: None,
            input_shape: vec![6],
            layers: vec![
                dense(6, 12, "a"),
                act(ActivationKind::Tanh),
                dense(12, 8, "b"),
                act(ActivationKind::LEAKY_RELU_DEFAULT),
                dense(8, 16, "c"),
                act(ActivationKind::Sigmoid),
                LayerSpec::Reshape { shape: vec![1, 4, 4] },
            ],
            injection_points: vec![0, 2, 4],
        },
        w,
    )
    .unwrap()
}

pub fn small_classifier(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::new();
    w.insert("k".into(), Tensor::randn(&[3, 1, 3, 3], 0.5, &mut rng));
    w.insert("kb".into(), Tensor::randn(&[3], 0.1, &mut rng));
    w.insert("d.w".into(), Tensor::randn(&[5, 12], 0.5, &mut rng));
    w.insert("d.b".into(), Tensor::randn(&[5], 0.1, &mut rng));
    Network::new(
        NetworkSpec {
            name: "small-classifier".into(),
            role: Role::Classifier,
            latent_dim: None,
            class_count: Some(5),
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel_size: [3, 3],
                    geometry: ConvGeometry::new(2, 1),
                    weight: "k".into(),
                    bias: Some("kb".into()),
                },
                LayerSpec::Activation {
                    function: ActivationKind::Relu,
                },
                LayerSpec::Reshape { shape: vec![12] },
                LayerSpec::Dense {
                    in_features: 12,
                    out_features: 5,
                    weight: "d.w".into(),
                    bias: "d.b".into(),
                },
            ],
            injection_points: vec![],
        },
        w,
    )
    .unwrap()
}

fn random_perts(spec: &NetworkSpec, mask: InjectionMask, std: f32, rng: &mut ChaCha8Rng) -> PerturbationSet {
    let mut p = PerturbationSet::for_spec(spec, mask).unwrap();
    let shapes = spec.injection_shapes().unwrap();
    for (i, s) in shapes.iter().enumerate() {
        if p.mask().is_active(i) {
            p.set(i, Tensor::randn(s, std, rng)).unwrap();
        }
    }
    p
}

pub fn composite_cases() -> Vec<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut out = Vec::new();

    let g = small_generator(1);
    let c = small_classifier(2);
    let sigma = calibrate(&g, 64, 3, 1e-6).unwrap();
    let z = Tensor::randn(&[1, 6], 1.0, &mut rng);
    let p = random_perts(g.spec(), InjectionMask::all(3), 0.5, &mut rng);
    let top = c.predict(&g.forward_plain(&z).unwrap()).unwrap().label;
    out.push(check_composite("three-layer generator composite", &g, &c, &sigma, &z, &p, (top + 1) % 5, 70));

    let g = fixtures::mnist_generator(7).unwrap();
    let c = fixtures::center_classifier(fixtures::mnist_classifier(11).unwrap(), &g, 256, 5).unwrap();
    let sigma = calibrate(&g, 128, 3, 1e-6).unwrap();
    let tuples = search::sample_tuples(10, fixtures::MNIST_LATENT_DIM, 2, 9).unwrap();
    for (i, (name, flags)) in [
        ("fixture composite, all points", vec![true; 4]),
        ("fixture composite, last half", vec![false, false, true, true]),
    ]
    .into_iter()
    .enumerate()
    {
        let tuple = label_from_prediction(&tuples[i], &g, &c).unwrap();
        let p = random_perts(g.spec(), InjectionMask::from_flags(flags), 0.3, &mut rng);
        out.push(check_composite(name, &g, &c, &sigma, &tuple.z, &p, tuple.t, 71 + i as u64));
    }
    out
}

/// Linear toy: identity generator perturbed at the latent, two-class dense
/// classifier. `|(w_t - w_y)_i * sigma_i|` is the same for every `i`, so
/// Adam's per-coordinate normalisation still moves along the gradient and
/// the search approaches the closed-form minimum along a straight line.
pub struct LinearToy {
    pub generator: Network,
    pub classifier: Network,
    pub sigma: latprobe_core::SigmaProfile,
    pub tuple: latprobe_core::Tuple,
    pub min_norm: f64,
}

/// The class margin, and with it the minimal norm, is drawn from
/// `[0.5, margin_hi)`.
pub fn linear_toy(seed: u64, dim: usize, margin_hi: f32) -> LinearToy {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma: Vec<f32> = (0..dim).map(|_| rng.random_range(0.5f32..2.0)).collect();
    let w_diff: Vec<f32> = sigma
        .iter()
        .map(|s| if rng.random_bool(0.5) { 1.0 / s } else { -1.0 / s })
        .collect();
    let w_y: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let w_t: Vec<f32> = w_y.iter().zip(&w_diff).map(|(a, d)| a + d).collect();
    let tuple = latprobe_core::Tuple::from_parts(0, rng.random(), 0, 1, dim);
    let margin: f32 = rng.random_range(0.5..margin_hi);
    // score_t - score_y = w_diff . (z + p * sigma) + b_t, with b_y = 0
    let wz: f32 = w_diff.iter().zip(tuple.z.data()).map(|(a, b)| a * b).sum();
    let b_t = -wz - margin;

    let mut weight = w_y.clone();
    weight.extend(&w_t);
    let classifier = fixtures::linear_classifier(
        Tensor::new(vec![2, dim], weight).unwrap(),
        Tensor::new(vec![2], vec![0.0, b_t]).unwrap(),
    )
    .unwrap();

    // The f32 forward pass decides success; measure the margin it actually
    // sees on the unperturbed input.
    let out = classifier.forward_plain(&tuple.z).unwrap();
    let seen = f64::from(out.data()[0]) - f64::from(out.data()[1]);
    let wd: Vec<f64> = w_diff.iter().map(|&v| f64::from(v)).collect();
    let sg: Vec<f64> = sigma.iter().map(|&v| f64::from(v)).collect();
    LinearToy {
        generator: fixtures::identity_generator(dim).unwrap(),
        classifier,
        sigma: latprobe_core::SigmaProfile::new(vec![Tensor::new(vec![1, dim], sigma).unwrap()], 0, 0, 1e-6).unwrap(),
        tuple,
        min_norm: super::oracles::linear_min_norm(&wd, &sg, seen),
    }
}
