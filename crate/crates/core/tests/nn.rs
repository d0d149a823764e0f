use rand::Rng;
use rand_distr::StandardNormal;

use scalweight::data::{gen_multidomain, MultiDomainConfig};
use scalweight::nn::{loss_and_grad, Activation, Architecture, Capacity, LossKind, Matrix, Model, OptimizerConfig};
use scalweight::rng::seeded;
use scalweight::train::{Method, TrainConfig, TrainingSession};
use scalweight::weighting::WeightVector;

fn capacity(depth: usize, width: usize, mult: f64, head_depth: usize, shared: usize) -> Capacity {
    Capacity {
        trunk_depth: depth,
        base_width: width,
        width_multiplier: mult,
        head_depth,
        shared_head_layers: shared,
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn forward_matches_a_straight_line_reimplementation() {
    let arch = Architecture {
        input_dim: 3,
        capacity: capacity(1, 4, 1.0, 0, 0),
        head_outputs: vec![2],
        activation: Activation::Relu,
    };
    let model = Model::new(arch, 0).unwrap();
    let layout = model.layout();
    assert_eq!(layout.len(), 2);
    let p = model.params();
    let x = [0.5, -1.25, 2.0];

    let (l0, l1) = (&layout[0], &layout[1]);
    let mut hidden = vec![0.0; l0.out_dim];
    for (o, h) in hidden.iter_mut().enumerate() {
        let mut z = p[l0.bias_offset + o];
        for (k, xk) in x.iter().enumerate() {
            z += p[l0.weight_offset + o * l0.in_dim + k] * xk;
        }
        *h = if z > 0.0 { z } else { 0.0 };
    }
    let mut expected = vec![0.0; l1.out_dim];
    for (o, y) in expected.iter_mut().enumerate() {
        let mut z = p[l1.bias_offset + o];
        for (k, hk) in hidden.iter().enumerate() {
            z += p[l1.weight_offset + o * l1.in_dim + k] * hk;
        }
        *y = z;
    }

    let out = model.predict(&Matrix::from_vec(1, 3, x.to_vec()).unwrap(), 0).unwrap();
    assert_eq!(out.as_slice(), expected.as_slice());
}

#[test]
fn backward_is_linear_in_the_loss_gradient() {
    let mut rng = seeded(5, 0);
    let arch = Architecture {
        input_dim: 4,
        capacity: capacity(2, 6, 1.0, 1, 0),
        head_outputs: vec![3],
        activation: Activation::Tanh,
    };
    let model = Model::new(arch, 3).unwrap();
    let x = Matrix::from_vec(5, 4, gaussian(&mut rng, 20)).unwrap();
    let (out, tape) = model.forward(&x, 0).unwrap();
    let y1 = Matrix::from_vec(5, 1, (0..5).map(|i| (i % 3) as f64).collect()).unwrap();
    let y2 = Matrix::from_vec(5, 3, gaussian(&mut rng, 15)).unwrap();
    let (_, d1) = loss_and_grad(LossKind::SoftmaxCrossEntropy, &out, &y1).unwrap();
    let (_, d2) = loss_and_grad(LossKind::L1, &out, &y2).unwrap();
    let (a, b) = (0.3, -1.7);
    let combined = Matrix::from_vec(
        5,
        3,
        d1.as_slice().iter().zip(d2.as_slice()).map(|(u, v)| a * u + b * v).collect(),
    )
    .unwrap();
    let g1 = model.backward(&tape, &d1).unwrap();
    let g2 = model.backward(&tape, &d2).unwrap();
    let g = model.backward(&tape, &combined).unwrap();
    for i in 0..g.len() {
        assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10, "coordinate {i}");
    }
}

#[test]
fn identical_seeds_give_bit_identical_parameters() {
    let ds = gen_multidomain(&MultiDomainConfig {
        n_per_source: vec![60, 40],
        ..MultiDomainConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        capacity: capacity(2, 8, 1.0, 0, 0),
        activation: Activation::Relu,
        optimizer: OptimizerConfig::sgd(0.05, 0.9, 3),
        batch_size: 8,
        method: Method::scalarization(),
        seed: 11,
        accumulation: 1,
        profile_stride: None,
    };
    let p = WeightVector::pair(0.3).unwrap();
    let run = || {
        let mut s = TrainingSession::new(&ds, &cfg).unwrap();
        for _ in 0..3 {
            s.run_epoch(&ds, &p).unwrap();
        }
        s.model().params().to_vec()
    };
    let a = run();
    assert_eq!(a, run());
    let mut other = cfg.clone();
    other.seed = 12;
    let mut s = TrainingSession::new(&ds, &other).unwrap();
    s.run_epoch(&ds, &p).unwrap();
    assert_ne!(s.model().params(), &a[..]);
}

fn params(cap: Capacity, heads: usize) -> usize {
    Architecture {
        input_dim: 6,
        capacity: cap,
        head_outputs: vec![3; heads],
        activation: Activation::Relu,
    }
    .param_count()
}

#[test]
fn parameter_count_grows_with_depth_and_width() {
    for depth in 1..4 {
        assert!(params(capacity(depth + 1, 8, 1.0, 1, 0), 2) > params(capacity(depth, 8, 1.0, 1, 0), 2));
    }
    for m in [0.25, 0.5, 1.0, 2.0] {
        assert!(params(capacity(2, 8, m * 2.0, 1, 0), 2) > params(capacity(2, 8, m, 1, 0), 2));
    }
}

#[test]
fn sharing_head_layers_reduces_parameters() {
    let counts: Vec<usize> = (0..=3).map(|s| params(capacity(2, 8, 1.0, 3, s), 3)).collect();
    for w in counts.windows(2) {
        assert!(w[1] < w[0], "{counts:?}");
    }
    assert_eq!(params(capacity(2, 8, 1.0, 3, 2), 1), params(capacity(2, 8, 1.0, 3, 0), 1));
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    let (d, h, k) = (6usize, 8usize, 3usize);
    let expected = (d * h + h) + (h * h + h) + 2 * (h * h + h) + 2 * (h * k + k);
    assert_eq!(params(capacity(2, 8, 1.0, 1, 0), 2), expected);
}
