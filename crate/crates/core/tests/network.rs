use cpnn_core::cp::{normalize, CpMode};
use cpnn_core::network::{
    backward, cp_ify, densify, forward, margin_loss, margins, LayerGrad, LayerSpec, NetworkModel,
};
use cpnn_core::tensor::DenseTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()
}

fn conv_cp_layer(s: usize, o: usize, kx: usize, ky: usize, r: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    let lambdas: Vec<f64> = (0..r).map(|_| rng.gen::<f64>() + 0.1).collect();
    let modes = vec![
        CpMode { dims: vec![o], factors: (0..r).map(|_| random_vec(o, rng)).collect() },
        CpMode { dims: vec![s], factors: (0..r).map(|_| random_vec(s, rng)).collect() },
        CpMode { dims: vec![kx, ky], factors: (0..r).map(|_| random_vec(kx * ky, rng)).collect() },
    ];
    let (kernel, _) = normalize(&lambdas, &modes).unwrap();
    LayerSpec::ConvCp { s, o, kx, ky, kernel }
}

fn fc_cp_layer(
    s1: usize,
    s2: usize,
    s1p: usize,
    s2p: usize,
    r: usize,
    rng: &mut ChaCha8Rng,
) -> LayerSpec {
    let lambdas: Vec<f64> = (0..r).map(|_| rng.gen::<f64>() + 0.1).collect();
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

fn small_conv_net(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            conv_cp_layer(2, 3, 2, 2, 3, &mut rng),
            conv_cp_layer(3, 2, 2, 2, 2, &mut rng),
        ],
        input_shape: vec![4, 4, 2],
    }
}

fn small_fc_net(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            fc_cp_layer(2, 2, 3, 2, 3, &mut rng),
            fc_cp_layer(3, 2, 2, 2, 2, &mut rng),
        ],
        input_shape: vec![4],
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    DenseTensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
}

#[test]
fn cp_forward_matches_densified_conv() {
    let model = small_conv_net(1);
    model.validate().unwrap();
    let dense = densify(&model);
    for seed in 0..10 {
        let x = random_tensor(&[4, 4, 2], 50 + seed);
        let (s1, t1) = forward(&model, &x).unwrap();
        let (s2, t2) = forward(&dense, &x).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-10);
        }
        let diff = t1
            .final_output()
            .sub(t2.final_output())
            .unwrap()
            .frobenius_norm();
        assert!(diff <= 1e-10);
    }
}

#[test]
fn cp_forward_matches_densified_fc() {
    let model = small_fc_net(2);
    model.validate().unwrap();
    let dense = densify(&model);
    for seed in 0..10 {
        let x = random_tensor(&[4], 70 + seed);
        let (s1, _) = forward(&model, &x).unwrap();
        let (s2, _) = forward(&dense, &x).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn conv_readout_is_global_spatial_sum() {
    // Single 1x1 identity conv layer: scores must equal the per-channel sum
    // of the input.
    let mut w = DenseTensor::zeros(&[2, 2, 1, 1]);
    w.set(&[0, 0, 0, 0], 1.0);
    w.set(&[1, 1, 0, 0], 1.0);
    let model = NetworkModel {
        layers: vec![LayerSpec::ConvDense { s: 2, o: 2, kx: 1, ky: 1, weights: w }],
        input_shape: vec![3, 3, 2],
    };
    let x = random_tensor(&[3, 3, 2], 5);
    let (scores, _) = forward(&model, &x).unwrap();
    for c in 0..2 {
        let sum: f64 = (0..3)
            .flat_map(|p| (0..3).map(move |q| (p, q)))
            .map(|(p, q)| x.get(&[p, q, c]))
            .sum();
        assert!((scores[c] - sum).abs() <= 1e-12);
    }
}

#[test]
fn skip_with_zero_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inner = match conv_cp_layer(2, 2, 2, 2, 2, &mut rng) {
        LayerSpec::ConvCp { s, o, kx, ky, mut kernel } => {
            for l in kernel.lambdas.iter_mut() {
                *l = 0.0;
            }
            LayerSpec::ConvCp { s, o, kx, ky, kernel }
        }
        _ => unreachable!(),
    };
    let plain = NetworkModel {
        layers: vec![
            LayerSpec::Skip { inner: Box::new(inner) },
            conv_cp_layer(2, 2, 2, 2, 2, &mut rng),
        ],
        input_shape: vec![4, 4, 2],
    };
    plain.validate().unwrap();
    let x = random_tensor(&[4, 4, 2], 9);
    let (_, trace) = forward(&plain, &x).unwrap();
    // Zero inner kernel: the skip layer passes its input straight through.
    let diff = trace.preacts[0].sub(&x).unwrap().frobenius_norm();
    assert!(diff <= 1e-14);
}

#[test]
fn margin_loss_thresholds() {
    let model = small_conv_net(4);
    let samples: Vec<(DenseTensor, usize)> = (0..20)
        .map(|i| (random_tensor(&[4, 4, 2], 100 + i), (i % 2) as usize))
        .collect();
    let m = margins(&model, &samples).unwrap();
    // At γ = 0 the margin loss is exactly the misclassification rate
    // (counting ties as errors).
    let err_rate =
        m.iter().filter(|&&v| v <= 0.0).count() as f64 / samples.len() as f64;
    assert_eq!(margin_loss(&model, &samples, 0.0).unwrap(), err_rate);
    // Above the largest margin every sample violates.
    let max_m = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(margin_loss(&model, &samples, max_m + 1.0).unwrap(), 1.0);
    // Monotone in γ.
    let a = margin_loss(&model, &samples, 0.1).unwrap();
    let b = margin_loss(&model, &samples, 0.5).unwrap();
    assert!(a <= b);
    assert!(margin_loss(&model, &samples, -1.0).is_err());
}

#[test]
fn cp_ify_at_full_rank_preserves_function() {
    // Densify a CP net, re-decompose at ample rank, and compare outputs.
    let model = small_conv_net(6);
    let dense = densify(&model);
    // rank caps: min over grouped modes of the other modes' size product = 6
    let cp = cp_ify(&dense, &[6, 6], 1e-14, 0).unwrap();
    for seed in 0..5 {
        let x = random_tensor(&[4, 4, 2], 200 + seed);
        let (s1, _) = forward(&dense, &x).unwrap();
        let (s2, _) = forward(&cp, &x).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn validate_rejects_channel_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = NetworkModel {
        layers: vec![
            conv_cp_layer(2, 3, 2, 2, 2, &mut rng),
            conv_cp_layer(4, 2, 2, 2, 2, &mut rng), // expects 4 channels, gets 3
        ],
        input_shape: vec![4, 4, 2],
    };
    assert!(model.validate().is_err());
}

// ---- finite-difference gradient check -------------------------------------

fn loss_of(model: &NetworkModel, x: &DenseTensor, y: usize) -> f64 {
    backward(model, x, y).unwrap().0
}

/// Applies f to the parameter value selected by (layer index, grad path) on a
/// clone of the model and returns the clone.
fn perturbed(
    model: &NetworkModel,
    k: usize,
    path: &ParamPath,
    delta: f64,
) -> NetworkModel {
    let mut m = model.clone();
    fn apply(layer: &mut LayerSpec, path: &ParamPath, delta: f64) {
        match (layer, path) {
            (LayerSpec::ConvDense { weights, .. }, ParamPath::Dense(i))
            | (LayerSpec::FcDense { weights, .. }, ParamPath::Dense(i)) => {
                weights.data[*i] += delta;
            }
            (LayerSpec::ConvCp { kernel, .. }, ParamPath::Lambda(r))
            | (LayerSpec::FcCp { kernel, .. }, ParamPath::Lambda(r)) => {
                kernel.lambdas[*r] += delta;
            }
            (LayerSpec::ConvCp { kernel, .. }, ParamPath::Factor(m, r, row))
            | (LayerSpec::FcCp { kernel, .. }, ParamPath::Factor(m, r, row)) => {
                kernel.modes[*m].factors[*r][*row] += delta;
            }
            (LayerSpec::Skip { inner }, p) => apply(inner, p, delta),
            _ => panic!("path does not match layer"),
        }
    }
    apply(&mut m.layers[k], path, delta);
    m
}

enum ParamPath {
    Dense(usize),
    Lambda(usize),
    Factor(usize, usize, usize),
}

/// All parameter paths of a layer, paired with the analytic gradient entry.
fn paths_and_grads(layer: &LayerSpec, grad: &LayerGrad) -> Vec<(ParamPath, f64)> {
    match (layer, grad) {
        (LayerSpec::ConvDense { weights, .. }, LayerGrad::Dense(g))
        | (LayerSpec::FcDense { weights, .. }, LayerGrad::Dense(g)) => (0..weights.data.len())
            .map(|i| (ParamPath::Dense(i), g.data[i]))
            .collect(),
        (LayerSpec::ConvCp { kernel, .. }, LayerGrad::Cp { lambdas, factors })
        | (LayerSpec::FcCp { kernel, .. }, LayerGrad::Cp { lambdas, factors }) => {
            let mut out = Vec::new();
            for r in 0..kernel.lambdas.len() {
                out.push((ParamPath::Lambda(r), lambdas[r]));
            }
            for (m, mode) in kernel.modes.iter().enumerate() {
                for (r, f) in mode.factors.iter().enumerate() {
                    for row in 0..f.len() {
                        out.push((ParamPath::Factor(m, r, row), factors[m][r][row]));
                    }
                }
            }
            out
        }
        (LayerSpec::Skip { inner }, LayerGrad::Skip(g)) => paths_and_grads(inner, g),
        _ => panic!("grad does not match layer"),
    }
}

fn gradcheck(model: &NetworkModel, x: &DenseTensor, y: usize) {
    let (_, _, grads) = backward(model, x, y).unwrap();
    let h = 1e-5;
    let mut checked = 0usize;
    for (k, (layer, grad)) in model.layers.iter().zip(&grads).enumerate() {
        for (path, analytic) in paths_and_grads(layer, grad) {
            let lp = loss_of(&perturbed(model, k, &path, h), x, y);
            let lm = loss_of(&perturbed(model, k, &path, -h), x, y);
            let numeric = (lp - lm) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / scale <= 1e-5,
                "layer {k}: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn gradients_match_finite_differences_conv() {
    let model = small_conv_net(10);
    gradcheck(&model, &random_tensor(&[4, 4, 2], 11), 1);
}

#[test]
fn gradients_match_finite_differences_fc() {
    let model = small_fc_net(12);
    gradcheck(&model, &random_tensor(&[4], 13), 2);
}

#[test]
fn gradients_match_finite_differences_dense_and_skip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = NetworkModel {
        layers: vec![
            LayerSpec::ConvDense {
                s: 2,
                o: 2,
                kx: 2,
                ky: 2,
                weights: random_tensor(&[2, 2, 2, 2], 15),
            },
            LayerSpec::Skip {
                inner: Box::new(conv_cp_layer(2, 2, 2, 2, 2, &mut rng)),
            },
            conv_cp_layer(2, 3, 2, 2, 2, &mut rng),
        ],
        input_shape: vec![4, 4, 2],
    };
    model.validate().unwrap();
    gradcheck(&model, &random_tensor(&[4, 4, 2], 16), 0);
}

#[test]
fn gradients_match_finite_differences_fc_dense() {
    let model = NetworkModel {
        layers: vec![
            LayerSpec::FcDense {
                s1: 2,
                s2: 2,
                s1p: 2,
                s2p: 2,
                weights: random_tensor(&[2, 2, 2, 2], 17),
            },
            fc_cp_layer(2, 2, 2, 2, 2, &mut ChaCha8Rng::seed_from_u64(18)),
        ],
        input_shape: vec![4],
    };
    model.validate().unwrap();
    gradcheck(&model, &random_tensor(&[4], 19), 3);
}
