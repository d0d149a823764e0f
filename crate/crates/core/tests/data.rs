use scalweight::data::{
    gen_multidomain, gen_multitask, gen_multitask_with_gram, generating_vectors, load_csv, standardize_targets, write_csv, CsvSchema,
    DataSplits, MultiDomainConfig, MultiTaskConfig, ResamplingSampler, TargetKind,
};
use scalweight::experiment::source_metric;
use scalweight::nn::{Activation, Capacity, OptimizerConfig};
use scalweight::train::{train_single_source, Method, TrainConfig, TrainingSession};
use scalweight::weighting::WeightVector;

fn sd_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        capacity: Capacity {
            trunk_depth: 1,
            base_width: 16,
            width_multiplier: 1.0,
            head_depth: 0,
            shared_head_layers: 0,
        },
        activation: Activation::Relu,
        optimizer: OptimizerConfig::sgd(0.05, 0.9, epochs),
        batch_size: 32,
        method: Method::scalarization(),
        seed,
        accumulation: 1,
        profile_stride: None,
    }
}

/// Accuracy of a domain-0 model on the held-out part of domains 0 and 1.
fn cross_domain_accuracy(shift: f64, seed: u64) -> (f64, f64) {
    let full = gen_multidomain(&MultiDomainConfig {
        seed,
        n_per_source: vec![2000, 2000],
        domain_shift: shift,
        ..MultiDomainConfig::default()
    })
    .unwrap();
    let splits = DataSplits::from_dataset(&full, 0.1, 0.3, seed).unwrap();
    let model = train_single_source(&splits.train, 0, &sd_config(seed, 10), 10).unwrap();
    (
        source_metric(&model, &splits.test, 0).unwrap(),
        source_metric(&model, &splits.test, 1).unwrap(),
    )
}

#[test]
fn unshifted_domains_share_one_classifier() {
    for seed in 0..2 {
        let (own, other) = cross_domain_accuracy(0.0, seed);
        assert!((own - other).abs() < 0.02, "seed {seed}: {own} vs {other}");
        assert!(own > 0.5, "seed {seed}: {own}");
    }
}

/// A single seed can only score multiples of `1 / class_count` on the shifted
/// domain, so the bound is checked on the mean over seeds.
#[test]
fn large_shift_defeats_zero_shot_transfer() {
    let classes = 10;
    let chance = 1.0 / classes as f64;
    let seeds = 0..8u64;
    let mut zero_shot = Vec::new();
    for seed in seeds.clone() {
        let full = gen_multidomain(&MultiDomainConfig {
            seed,
            n_per_source: vec![2000, 2000],
            domain_shift: 100.0,
            class_count: classes,
            ..MultiDomainConfig::default()
        })
        .unwrap();
        let splits = DataSplits::from_dataset(&full, 0.1, 0.3, seed).unwrap();
        let model = train_single_source(&splits.train, 0, &sd_config(seed, 10), 10).unwrap();
        let own = source_metric(&model, &splits.test, 0).unwrap();
        assert!(own > 0.8, "seed {seed}: in-domain accuracy {own}");
        zero_shot.push(source_metric(&model, &splits.test, 1).unwrap());
    }
    let mean = zero_shot.iter().sum::<f64>() / zero_shot.len() as f64;
    assert!(mean <= chance + 0.1, "zero-shot accuracies {zero_shot:?}");
}

#[test]
fn generators_are_pure_functions_of_their_parameters() {
    let cfg = MultiDomainConfig {
        class_skew: 0.3,
        domain_shift: 1.0,
        ..MultiDomainConfig::default()
    };
    let bytes = |cfg: &MultiDomainConfig| {
        let mut buf = Vec::new();
        write_csv(&mut buf, &gen_multidomain(cfg).unwrap()).unwrap();
        buf
    };
    assert_eq!(bytes(&cfg), bytes(&cfg));
    assert_ne!(bytes(&cfg), bytes(&MultiDomainConfig { seed: 1, ..cfg.clone() }));
}

#[test]
fn three_way_anti_correlation_reproduces_the_gram_matrix() {
    let gram = vec![vec![1.0, -0.5, -0.5], vec![-0.5, 1.0, -0.5], vec![-0.5, -0.5, 1.0]];
    let v = generating_vectors(3, 6, &gram).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let g: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            assert!((g - gram[i][j]).abs() < 1e-9, "({i},{j}) = {g}");
        }
    }
    let ds = gen_multitask_with_gram(3, 50, 6, &gram, 0.1, TargetKind::Regression).unwrap();
    assert_eq!(ds.source_count(), 3);
    assert_eq!(ds.counts(), vec![50, 50, 50]);
}

#[test]
fn csv_files_round_trip_through_disk() {
    let ds = gen_multidomain(&MultiDomainConfig {
        n_per_source: vec![30, 20, 10],
        ..MultiDomainConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let mut buf = Vec::new();
    write_csv(&mut buf, &ds).unwrap();
    std::fs::write(&path, &buf).unwrap();
    let schema = CsvSchema::of(&ds);
    let back = load_csv(&path, &schema).unwrap();
    assert_eq!(back.counts(), vec![30, 20, 10]);
    for t in 0..3 {
        assert_eq!(back.source(t).inputs.as_slice(), ds.source(t).inputs.as_slice());
        assert_eq!(back.source(t).targets.as_slice(), ds.source(t).targets.as_slice());
    }
    let mut again = Vec::new();
    write_csv(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn regression_targets_standardize_to_zero_mean_unit_variance() {
    let ds = gen_multitask(&MultiTaskConfig {
        n: 400,
        task_correlation: 0.2,
        target: TargetKind::Regression,
        ..MultiTaskConfig::default()
    })
    .unwrap();
    let (std_ds, stats) = standardize_targets(&ds).unwrap();
    for t in 0..2 {
        let y = std_ds.source(t).targets.as_slice();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12, "task {t}: {mean} {var}");
    }
    let mut restored = std_ds.source(0).targets.clone();
    stats.invert(0, &mut restored);
    for (a, b) in restored.as_slice().iter().zip(ds.source(0).targets.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mixture_sampling_follows_the_weights() {
    let ds = gen_multidomain(&MultiDomainConfig::default()).unwrap();
    let mut s = ResamplingSampler::new(WeightVector::new(vec![0.3, 0.7]).unwrap(), 100, 9).unwrap();
    let mut from0 = 0;
    for _ in 0..100 {
        from0 += s.next_batch(&ds).unwrap().source_ids.iter().filter(|&&t| t == 0).count();
    }
    let frac = from0 as f64 / 10_000.0;
    assert!((frac - 0.3).abs() < 0.015, "{frac}");
}

#[test]
fn steps_per_epoch_do_not_depend_on_the_weights() {
    let ds = gen_multidomain(&MultiDomainConfig {
        n_per_source: vec![90, 300],
        ..MultiDomainConfig::default()
    })
    .unwrap();
    let cfg = sd_config(0, 1);
    let mut steps = Vec::new();
    for p in [0.0, 0.2, 0.5, 1.0] {
        let mut s = TrainingSession::new(&ds, &cfg).unwrap();
        steps.push(s.run_epoch(&ds, &WeightVector::pair(p).unwrap()).unwrap().steps);
    }
    assert!(steps.iter().all(|&k| k == steps[0]), "{steps:?}");
    assert_eq!(steps[0], 90usize.div_ceil(32));
}
