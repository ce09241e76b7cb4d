use cpnn_core::compression::{
    compress, compress_epsilon, fbrc, fbrc_skip, output_residual, project, verify_chain,
};
use cpnn_core::cp::{normalize, CpMode};
use cpnn_core::network::{forward, LayerSpec, NetworkModel};
use cpnn_core::properties::{measure_properties, TfVariant};
use cpnn_core::tensor::DenseTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()
}

/// Conv CP layer whose spectrum decays geometrically, so truncation bites.
fn decaying_conv_layer(
    s: usize,
    o: usize,
    r: usize,
    decay: f64,
    rng: &mut ChaCha8Rng,
) -> LayerSpec {
    let lambdas: Vec<f64> = (0..r).map(|c| decay.powi(c as i32)).collect();
    let modes = vec![
        CpMode { dims: vec![o], factors: (0..r).map(|_| random_vec(o, rng)).collect() },
        CpMode { dims: vec![s], factors: (0..r).map(|_| random_vec(s, rng)).collect() },
        CpMode { dims: vec![3, 3], factors: (0..r).map(|_| random_vec(9, rng)).collect() },
    ];
    let (kernel, _) = normalize(&lambdas, &modes).unwrap();
    LayerSpec::ConvCp { s, o, kx: 3, ky: 3, kernel }
}

fn decaying_fc_layer(
    s1: usize,
    s2: usize,
    s1p: usize,
    s2p: usize,
    r: usize,
    decay: f64,
    rng: &mut ChaCha8Rng,
) -> LayerSpec {
    let lambdas: Vec<f64> = (0..r).map(|c| decay.powi(c as i32)).collect();
    let modes = vec![
        CpMode { dims: vec![s1, s2], factors: (0..r).map(|_| random_vec(s1 * s2, rng)).collect() },
        CpMode {
            dims: vec![s1p, s2p],
            factors: (0..r).map(|_| random_vec(s1p * s2p, rng)).collect(),
        },
    ];
    let (kernel, _) = normalize(&lambdas, &modes).unwrap();
    LayerSpec::FcCp { s1, s2, s1p, s2p, kernel }
}

fn conv_net(seed: u64, decay: f64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            decaying_conv_layer(2, 3, 6, decay, &mut rng),
            decaying_conv_layer(3, 2, 6, decay, &mut rng),
        ],
        input_shape: vec![8, 8, 2],
    }
}

fn fc_net(seed: u64, decay: f64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            decaying_fc_layer(3, 3, 3, 3, 8, decay, &mut rng),
            decaying_fc_layer(3, 3, 2, 2, 6, decay, &mut rng),
        ],
        input_shape: vec![9],
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    DenseTensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
}

fn samples(shape: &[usize], m: usize, base: u64) -> Vec<(DenseTensor, usize)> {
    (0..m)
        .map(|i| (random_tensor(shape, base + i as u64), i % 2))
        .collect()
}

#[test]
fn guarantee_holds_over_epsilons_conv() {
    let model = conv_net(1, 0.25);
    let data = samples(&[8, 8, 2], 8, 100);
    for &eps in &[0.05, 0.2, 0.5, 1.0] {
        let (compressed, plan, report) =
            compress_epsilon(&model, &data, eps, TfVariant::PerFrequency, false).unwrap();
        assert!(report.max_residual <= eps, "ε={eps}: {}", report.max_residual);
        assert_eq!(report.epsilon, eps);
        // Re-verify the residual independently.
        let (res, _) = output_residual(&model, &compressed, &data).unwrap();
        assert!((res - report.max_residual).abs() <= 1e-15);
        for lp in &plan.layers {
            assert!(lp.r_hat >= 1 && lp.r_hat <= 6);
        }
    }
}

#[test]
fn guarantee_holds_over_epsilons_fc() {
    let model = fc_net(2, 0.3);
    let data = samples(&[9], 10, 200);
    for &eps in &[0.05, 0.2, 0.5] {
        let (_, _, report) =
            compress_epsilon(&model, &data, eps, TfVariant::PerFrequency, false).unwrap();
        assert!(report.max_residual <= eps, "ε={eps}: {}", report.max_residual);
    }
}

#[test]
fn ranks_monotone_in_epsilon() {
    // Tighter ε never selects fewer components at any layer.
    let model = conv_net(3, 0.25);
    let data = samples(&[8, 8, 2], 6, 300);
    let table = measure_properties(&model, &data).unwrap();
    let mut prev: Option<Vec<usize>> = None;
    for &eps in &[1.0, 0.5, 0.2, 0.05, 0.01] {
        let plan = fbrc(&model, &table, eps, TfVariant::PerFrequency).unwrap();
        let ranks: Vec<usize> = plan.layers.iter().map(|l| l.r_hat).collect();
        if let Some(p) = &prev {
            for (a, b) in ranks.iter().zip(p) {
                assert!(a >= b, "ε={eps}: ranks {ranks:?} vs {p:?}");
            }
        }
        prev = Some(ranks);
    }
}

#[test]
fn both_variants_carry_the_guarantee() {
    // The two spectral variants may rank-select differently, but both carry
    // the same guarantee.
    let model = conv_net(4, 0.3);
    let data = samples(&[8, 8, 2], 6, 400);
    for variant in [TfVariant::PerFrequency, TfVariant::PerComponent] {
        let (_, _, report) = compress_epsilon(&model, &data, 0.2, variant, false).unwrap();
        assert!(report.max_residual <= 0.2);
    }
}

#[test]
fn per_frequency_rank_at_most_per_component() {
    // Per-frequency nb is pointwise ≤ per-component nb, so at equal ε it
    // never needs more components at the deepest layer (where the deeper
    // propagation product is empty and the comparison is pointwise).
    let model = conv_net(5, 0.35);
    let data = samples(&[8, 8, 2], 6, 500);
    let table = measure_properties(&model, &data).unwrap();
    let pf = fbrc(&model, &table, 0.3, TfVariant::PerFrequency).unwrap();
    let pc = fbrc(&model, &table, 0.3, TfVariant::PerComponent).unwrap();
    let last = model.layers.len() - 1;
    assert!(pf.layers[last].r_hat <= pc.layers[last].r_hat);
}

#[test]
fn project_truncates_to_plan() {
    let model = conv_net(6, 0.25);
    let data = samples(&[8, 8, 2], 6, 600);
    let table = measure_properties(&model, &data).unwrap();
    let plan = fbrc(&model, &table, 0.1, TfVariant::PerFrequency).unwrap();
    let compressed = project(&model, &plan).unwrap();
    for (layer, lp) in compressed.layers.iter().zip(&plan.layers) {
        assert_eq!(layer.cp_kernel().unwrap().width(), lp.r_hat);
    }
}

#[test]
fn chain_budget_holds_at_every_depth() {
    let model = conv_net(7, 0.25);
    let data = samples(&[8, 8, 2], 8, 700);
    let table = measure_properties(&model, &data).unwrap();
    let plan = fbrc(&model, &table, 0.2, TfVariant::PerFrequency).unwrap();
    let compressed = project(&model, &plan).unwrap();
    let ratios = verify_chain(&model, &compressed, &table, &plan, &data).unwrap();
    assert_eq!(ratios.len(), model.layers.len());
    for (m, r) in ratios.iter().enumerate() {
        assert!(*r <= 1.0 + 1e-9, "depth {}: ratio {r}", m + 1);
    }
}

#[test]
fn gamma_path_sets_epsilon_from_margin() {
    let model = conv_net(8, 0.25);
    let data = samples(&[8, 8, 2], 8, 800);
    let table = measure_properties(&model, &data).unwrap();
    let gamma = 0.1 * table.max_output_norm;
    let (_, plan, report) =
        compress(&model, &data, gamma, TfVariant::PerFrequency, false).unwrap();
    let expect = gamma / (2.0 * table.max_output_norm);
    assert!((report.epsilon_raw - expect).abs() <= 1e-12);
    assert!((report.epsilon - expect.min(1.0)).abs() <= 1e-12);
    assert!((plan.epsilon - report.epsilon).abs() <= 1e-12);
    assert!(report.max_residual <= report.epsilon);
}

#[test]
fn gamma_epsilon_is_clamped_to_one() {
    let model = conv_net(9, 0.25);
    let data = samples(&[8, 8, 2], 6, 900);
    let table = measure_properties(&model, &data).unwrap();
    // Huge margin: raw ε far above 1, must clamp but report the raw value.
    let gamma = 10.0 * table.max_output_norm;
    let (_, _, report) = compress(&model, &data, gamma, TfVariant::PerFrequency, false).unwrap();
    assert_eq!(report.epsilon, 1.0);
    assert!((report.epsilon_raw - 5.0).abs() <= 1e-12);
}

#[test]
fn invalid_epsilon_and_gamma_are_rejected() {
    let model = conv_net(10, 0.25);
    let data = samples(&[8, 8, 2], 4, 1000);
    assert!(compress_epsilon(&model, &data, 0.0, TfVariant::PerFrequency, false).is_err());
    assert!(compress_epsilon(&model, &data, 1.5, TfVariant::PerFrequency, false).is_err());
    assert!(compress_epsilon(&model, &data, -0.2, TfVariant::PerFrequency, false).is_err());
    assert!(compress(&model, &data, 0.0, TfVariant::PerFrequency, false).is_err());
    assert!(compress(&model, &data, -1.0, TfVariant::PerFrequency, false).is_err());
}

#[test]
fn dense_layers_cannot_be_projected() {
    let model = NetworkModel {
        layers: vec![LayerSpec::ConvDense {
            s: 1,
            o: 1,
            kx: 1,
            ky: 1,
            weights: DenseTensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
        }],
        input_shape: vec![2, 2, 1],
    };
    let data = samples(&[2, 2, 1], 3, 1100);
    assert!(compress_epsilon(&model, &data, 0.5, TfVariant::PerFrequency, false).is_err());
}

fn skip_net(seed: u64, decay: f64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            decaying_conv_layer(2, 3, 5, decay, &mut rng),
            LayerSpec::Skip {
                inner: Box::new(decaying_conv_layer(3, 3, 5, decay, &mut rng)),
            },
            decaying_conv_layer(3, 2, 5, decay, &mut rng),
        ],
        input_shape: vec![8, 8, 2],
    }
}

#[test]
fn skip_aware_plan_never_keeps_fewer_components_and_verifies() {
    let model = skip_net(11, 0.3);
    let data = samples(&[8, 8, 2], 8, 1200);
    let table = measure_properties(&model, &data).unwrap();
    let plain = fbrc(&model, &table, 0.2, TfVariant::PerFrequency).unwrap();
    let aware = fbrc_skip(&model, &table, 0.2, TfVariant::PerFrequency).unwrap();
    // The identity branch inflates the skip layer's propagation factor, so
    // layers upstream of it may need more components, never fewer.
    for (a, p) in aware.layers.iter().zip(&plain.layers) {
        assert!(a.r_hat >= p.r_hat);
    }
    let compressed = project(&model, &aware).unwrap();
    let (res, _) = output_residual(&model, &compressed, &data).unwrap();
    assert!(res <= 0.2);
}

#[test]
fn compressed_model_still_forwards() {
    let model = conv_net(12, 0.25);
    let data = samples(&[8, 8, 2], 6, 1300);
    let (compressed, _, _) =
        compress_epsilon(&model, &data, 0.3, TfVariant::PerFrequency, false).unwrap();
    compressed.validate().unwrap();
    let x = random_tensor(&[8, 8, 2], 9999);
    let (scores, _) = forward(&compressed, &x).unwrap();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| s.is_finite()));
}
