use cpnn_core::harness::{
    corrupt_labels, make_synthetic, square_factor, toy_cnn, toy_cnn_skip, toy_fc, train,
    TrainConfig,
};
use cpnn_core::network::forward;

#[test]
fn square_factor_pairs() {
    assert_eq!(square_factor(16), (4, 4));
    assert_eq!(square_factor(12), (3, 4));
    assert_eq!(square_factor(7), (1, 7));
    assert_eq!(square_factor(1), (1, 1));
    assert_eq!(square_factor(10), (2, 5));
}

#[test]
fn synthetic_dataset_shapes_and_determinism() {
    let a = make_synthetic(3, 5, &[8, 8, 1], 42).unwrap();
    assert_eq!(a.samples.len(), 15);
    assert_eq!(a.num_classes, 3);
    for (x, y) in &a.samples {
        assert_eq!(x.shape, vec![8, 8, 1]);
        assert!(*y < 3);
        assert!(x.all_finite());
    }
    for c in 0..3 {
        assert_eq!(a.samples.iter().filter(|(_, y)| *y == c).count(), 5);
    }
    let b = make_synthetic(3, 5, &[8, 8, 1], 42).unwrap();
    for ((xa, ya), (xb, yb)) in a.samples.iter().zip(&b.samples) {
        assert_eq!(ya, yb);
        assert_eq!(xa.data, xb.data);
    }
    let c = make_synthetic(3, 5, &[8, 8, 1], 43).unwrap();
    assert!(a.samples[0].0.data != c.samples[0].0.data);
}

#[test]
fn synthetic_flat_shape() {
    let d = make_synthetic(2, 4, &[16], 1).unwrap();
    assert_eq!(d.samples[0].0.shape, vec![16]);
    assert!(make_synthetic(0, 4, &[16], 1).is_err());
    assert!(make_synthetic(2, 4, &[2, 2], 1).is_err());
}

#[test]
fn corruption_changes_exactly_the_requested_fraction() {
    let data = make_synthetic(4, 10, &[8, 8, 1], 7).unwrap();
    for &rate in &[0.0, 0.25, 0.5, 1.0] {
        let bad = corrupt_labels(&data, rate, 11).unwrap();
        let changed = data
            .samples
            .iter()
            .zip(&bad.samples)
            .filter(|((_, a), (_, b))| a != b)
            .count();
        assert_eq!(changed, (rate * 40.0).floor() as usize);
        // Inputs are untouched; every corrupted label is a different class.
        for ((xa, _), (xb, yb)) in data.samples.iter().zip(&bad.samples) {
            assert_eq!(xa.data, xb.data);
            assert!(*yb < 4);
        }
    }
    let again = corrupt_labels(&data, 0.5, 11).unwrap();
    let first = corrupt_labels(&data, 0.5, 11).unwrap();
    for ((_, a), (_, b)) in again.samples.iter().zip(&first.samples) {
        assert_eq!(a, b);
    }
    assert!(corrupt_labels(&data, 1.5, 0).is_err());
    assert!(corrupt_labels(&data, -0.1, 0).is_err());
}

#[test]
fn presets_validate_and_forward() {
    for classes in [2, 4] {
        let cnn = toy_cnn(classes, 0);
        cnn.validate().unwrap();
        let data = make_synthetic(classes, 1, &[8, 8, 1], 0).unwrap();
        let (scores, _) = forward(&cnn, &data.samples[0].0).unwrap();
        assert_eq!(scores.len(), classes);

        let fc = toy_fc(classes, 0);
        fc.validate().unwrap();
        let data = make_synthetic(classes, 1, &[16], 0).unwrap();
        let (scores, _) = forward(&fc, &data.samples[0].0).unwrap();
        assert_eq!(scores.len(), classes);

        let skip = toy_cnn_skip(classes, 0);
        skip.validate().unwrap();
        assert!(skip.layers[1].is_skip());
    }
}

#[test]
fn preset_seeds_differ() {
    let a = toy_cnn(2, 0);
    let b = toy_cnn(2, 1);
    assert!(a.layers[0].cp_kernel().unwrap().lambdas != b.layers[0].cp_kernel().unwrap().lambdas);
}

#[test]
fn training_is_deterministic() {
    let data = make_synthetic(2, 8, &[8, 8, 1], 3).unwrap();
    let model = toy_cnn(2, 5);
    let config = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let (net_a, metrics_a) = train(&model, &data, &config).unwrap();
    let (net_b, metrics_b) = train(&model, &data, &config).unwrap();
    assert_eq!(net_a, net_b);
    for (a, b) in metrics_a.iter().zip(&metrics_b) {
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.accuracy, b.accuracy);
    }
    let other = TrainConfig { seed: 9, ..config };
    let (_, metrics_c) = train(&model, &data, &other).unwrap();
    assert!(metrics_a.last().unwrap().loss != metrics_c.last().unwrap().loss);
}

#[test]
fn training_fits_a_small_problem() {
    // Two classes of rank-2 patterns: a 2-layer slice of the CNN preset
    // should fit almost perfectly within 50 epochs.
    let data = make_synthetic(2, 10, &[8, 8, 1], 17).unwrap();
    let model = toy_cnn(2, 1);
    let config = TrainConfig { epochs: 50, ..TrainConfig::default() };
    let (trained, metrics) = train(&model, &data, &config).unwrap();
    let last = metrics.last().unwrap();
    assert!(
        last.accuracy >= 0.95,
        "final train accuracy {}",
        last.accuracy
    );
    assert!(last.loss < metrics[0].loss);
    // The trained model's CP invariants survived the optimizer.
    for layer in &trained.layers {
        let k = layer.cp_kernel().unwrap();
        for w in k.lambdas.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for l in &k.lambdas {
            assert!(*l >= 0.0);
        }
        for mode in &k.modes {
            for f in &mode.factors {
                let n: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn lr_halving_changes_trajectory() {
    let data = make_synthetic(2, 6, &[8, 8, 1], 23).unwrap();
    let model = toy_cnn(2, 2);
    let plain = TrainConfig { epochs: 6, ..TrainConfig::default() };
    let halved = TrainConfig { lr_halve_every: Some(2), ..plain.clone() };
    let (_, a) = train(&model, &data, &plain).unwrap();
    let (_, b) = train(&model, &data, &halved).unwrap();
    assert!(a.last().unwrap().loss != b.last().unwrap().loss);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = make_synthetic(2, 2, &[8, 8, 1], 1).unwrap();
    let model = toy_cnn(2, 0);
    let config = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(train(&model, &data, &config).is_err());
}
