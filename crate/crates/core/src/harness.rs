//! Synthetic datasets, label corruption, seeded network initialization
//! (including the toy presets), and a minimal deterministic SGD trainer
//! with momentum and weight decay.

use crate::cp::CpMode;
use crate::error::{CoreError, Result};
use crate::network::{backward, LayerGrad, LayerSpec, NetworkModel};
use crate::tensor::DenseTensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(DenseTensor, usize)>,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is halved every this many epochs, if set.
    pub lr_halve_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_halve_every: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Splits d into the most-square factor pair a·b = d with a ≤ b.
pub fn square_factor(d: usize) -> (usize, usize) {
    let mut a = (d as f64).sqrt() as usize;
    while a > 1 && d % a != 0 {
        a -= 1;
    }
    (a.max(1), d / a.max(1))
}

/// Class-conditional rank-2 spatial patterns plus Gaussian noise σ = 0.1.
/// Inputs with shape [H, W, C] get a fixed per-class, per-channel pattern;
/// flat shapes [d] use the most-square matricization of d.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    input_shape: &[usize],
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 || per_class < 1 {
        return Err(CoreError::InvalidArgument(
            "num_classes and per_class must be ≥ 1".into(),
        ));
    }
    let (h, w, c) = match input_shape {
        [h, w, c] => (*h, *w, *c),
        [d] => {
            let (a, b) = square_factor(*d);
            (a, b, 1)
        }
        _ => {
            return Err(CoreError::InvalidArgument(format!(
                "input shape must be [H,W,C] or [d], got {input_shape:?}"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per class and channel: pattern = u1⊗v1 + u2⊗v2.
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut pat = vec![0.0f64; h * w * c];
        for ch in 0..c {
            let u1: Vec<f64> = (0..h).map(|_| normal(&mut rng)).collect();
            let v1: Vec<f64> = (0..w).map(|_| normal(&mut rng)).collect();
            let u2: Vec<f64> = (0..h).map(|_| normal(&mut rng)).collect();
            let v2: Vec<f64> = (0..w).map(|_| normal(&mut rng)).collect();
            for i in 0..h {
                for j in 0..w {
                    pat[(i * w + j) * c + ch] = u1[i] * v1[j] + u2[i] * v2[j];
                }
            }
        }
        patterns.push(pat);
    }
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, pat) in patterns.iter().enumerate() {
        for _ in 0..per_class {
            let data: Vec<f64> = pat.iter().map(|&p| p + 0.1 * normal(&mut rng)).collect();
            let x = DenseTensor::from_vec(input_shape, data)?;
            samples.push((x, label));
        }
    }
    Ok(Dataset {
        samples,
        num_classes,
        input_shape: input_shape.to_vec(),
    })
}

/// Reassigns ⌊rate·m⌋ seeded-chosen samples a label drawn uniformly from
/// the OTHER classes (strict corruption).
pub fn corrupt_labels(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CoreError::InvalidArgument("rate must lie in [0,1]".into()));
    }
    if dataset.num_classes < 2 && rate > 0.0 {
        return Err(CoreError::InvalidArgument(
            "cannot corrupt a single-class dataset".into(),
        ));
    }
    let m = dataset.samples.len();
    let count = (rate * m as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut out = dataset.clone();
    for &i in order.iter().take(count) {
        let old = out.samples[i].1;
        let pick = rng.gen_range(0..dataset.num_classes - 1);
        out.samples[i].1 = if pick >= old { pick + 1 } else { pick };
    }
    Ok(out)
}

/// Seeded CP conv layer: unit-normalized factors, amplitudes ~ |N(0,1)|/R
/// so the initial layer gain is O(1).
pub fn init_conv_cp(
    s: usize,
    o: usize,
    kx: usize,
    ky: usize,
    rank: usize,
    rng: &mut ChaCha8Rng,
) -> LayerSpec {
    let lambdas: Vec<f64> = (0..rank)
        .map(|_| normal(rng).abs() / rank as f64)
        .collect();
    let gen_unit = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let nn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nn > 0.0 {
            v.iter_mut().for_each(|x| *x /= nn);
        } else {
            v[0] = 1.0;
        }
        v
    };
    let b = CpMode {
        dims: vec![o],
        factors: (0..rank).map(|_| gen_unit(rng, o)).collect(),
    };
    let a = CpMode {
        dims: vec![s],
        factors: (0..rank).map(|_| gen_unit(rng, s)).collect(),
    };
    let c = CpMode {
        dims: vec![kx, ky],
        factors: (0..rank).map(|_| gen_unit(rng, kx * ky)).collect(),
    };
    let (kernel, _) = crate::cp::normalize(&lambdas, &[b, a, c]).expect("valid init");
    LayerSpec::ConvCp {
        s,
        o,
        kx,
        ky,
        kernel,
    }
}

/// Seeded CP FC layer in the 2-matrix-mode convention.
pub fn init_fc_cp(
    s1: usize,
    s2: usize,
    s1p: usize,
    s2p: usize,
    rank: usize,
    rng: &mut ChaCha8Rng,
) -> LayerSpec {
    let lambdas: Vec<f64> = (0..rank)
        .map(|_| normal(rng).abs() / rank as f64)
        .collect();
    let gen_unit = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let nn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nn > 0.0 {
            v.iter_mut().for_each(|x| *x /= nn);
        } else {
            v[0] = 1.0;
        }
        v
    };
    let u = CpMode {
        dims: vec![s1, s2],
        factors: (0..rank).map(|_| gen_unit(rng, s1 * s2)).collect(),
    };
    let v = CpMode {
        dims: vec![s1p, s2p],
        factors: (0..rank).map(|_| gen_unit(rng, s1p * s2p)).collect(),
    };
    let (kernel, _) = crate::cp::normalize(&lambdas, &[u, v]).expect("valid init");
    LayerSpec::FcCp {
        s1,
        s2,
        s1p,
        s2p,
        kernel,
    }
}

/// Preset "toy-cnn": three CP conv layers 1→8→16→num_classes with 3×3
/// kernels on an 8×8 grid.
pub fn toy_cnn(num_classes: usize, seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            init_conv_cp(1, 8, 3, 3, 6, &mut rng),
            init_conv_cp(8, 16, 3, 3, 16, &mut rng),
            init_conv_cp(16, num_classes, 3, 3, 12, &mut rng),
        ],
        input_shape: vec![8, 8, 1],
    }
}

/// Preset "toy-fc": three CP FC layers 16→16→16→num_classes with 4×4
/// reshaping on the 16-wide activations.
pub fn toy_fc(num_classes: usize, seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2) = square_factor(num_classes);
    NetworkModel {
        layers: vec![
            init_fc_cp(4, 4, 4, 4, 8, &mut rng),
            init_fc_cp(4, 4, 4, 4, 8, &mut rng),
            init_fc_cp(4, 4, c1, c2, 6, &mut rng),
        ],
        input_shape: vec![16],
    }
}

/// Three-layer conv net whose middle layer is a skip wrapper (8→8 inner
/// kernel), for the skip-aware compression path.
pub fn toy_cnn_skip(num_classes: usize, seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel {
        layers: vec![
            init_conv_cp(1, 8, 3, 3, 6, &mut rng),
            LayerSpec::Skip {
                inner: Box::new(init_conv_cp(8, 8, 3, 3, 10, &mut rng)),
            },
            init_conv_cp(8, num_classes, 3, 3, 10, &mut rng),
        ],
        input_shape: vec![8, 8, 1],
    }
}

/// Gradients are clipped at this global ℓ₂ norm per batch; a fixed trainer
/// stabilization (large CP amplitudes early in training otherwise produce
/// runaway updates at this scale).
const CLIP_NORM: f64 = 10.0;

fn grad_sq(g: &LayerGrad) -> f64 {
    match g {
        LayerGrad::Dense(t) => t.data.iter().map(|x| x * x).sum(),
        LayerGrad::Cp { lambdas, factors } => {
            lambdas.iter().map(|x| x * x).sum::<f64>()
                + factors
                    .iter()
                    .flat_map(|m| m.iter())
                    .flat_map(|v| v.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
        }
        LayerGrad::Skip(inner) => grad_sq(inner),
    }
}

/// Adds weight decay: dense kernels decay everywhere; CP layers decay the
/// amplitudes only (factors are pinned to unit norm by renormalization).
fn add_weight_decay(layer: &LayerSpec, grad: &mut LayerGrad, wd: f64) {
    match (layer, grad) {
        (LayerSpec::ConvDense { weights, .. }, LayerGrad::Dense(g))
        | (LayerSpec::FcDense { weights, .. }, LayerGrad::Dense(g)) => {
            for (gv, &wv) in g.data.iter_mut().zip(&weights.data) {
                *gv += wd * wv;
            }
        }
        (LayerSpec::ConvCp { kernel, .. }, LayerGrad::Cp { lambdas, .. })
        | (LayerSpec::FcCp { kernel, .. }, LayerGrad::Cp { lambdas, .. }) => {
            for (gv, &lv) in lambdas.iter_mut().zip(&kernel.lambdas) {
                *gv += wd * lv;
            }
        }
        (LayerSpec::Skip { inner }, LayerGrad::Skip(g)) => add_weight_decay(inner, g, wd),
        _ => panic!("gradient structure mismatch"),
    }
}

/// θ ← θ − lr·v.
fn apply_step(layer: &mut LayerSpec, vel: &LayerGrad, lr: f64) {
    match (layer, vel) {
        (LayerSpec::ConvDense { weights, .. }, LayerGrad::Dense(v))
        | (LayerSpec::FcDense { weights, .. }, LayerGrad::Dense(v)) => {
            for (wv, &g) in weights.data.iter_mut().zip(&v.data) {
                *wv -= lr * g;
            }
        }
        (LayerSpec::ConvCp { kernel, .. }, LayerGrad::Cp { lambdas, factors })
        | (LayerSpec::FcCp { kernel, .. }, LayerGrad::Cp { lambdas, factors }) => {
            for (lv, &g) in kernel.lambdas.iter_mut().zip(lambdas) {
                *lv -= lr * g;
            }
            for (mode, gm) in kernel.modes.iter_mut().zip(factors) {
                for (f, gf) in mode.factors.iter_mut().zip(gm) {
                    for (fv, &g) in f.iter_mut().zip(gf) {
                        *fv -= lr * g;
                    }
                }
            }
        }
        (LayerSpec::Skip { inner }, LayerGrad::Skip(v)) => apply_step(inner, v, lr),
        _ => panic!("gradient structure mismatch"),
    }
}

/// Restores the CP invariants in place after a step: factor norms absorbed
/// into λ, signs pushed into the first mode so λ ≥ 0, components re-sorted
/// descending. The same permutation and sign flips are applied to the
/// momentum buffer so its entries keep following their components.
fn renormalize(layer: &mut LayerSpec, vel: &mut LayerGrad) {
    match (layer, vel) {
        (LayerSpec::ConvCp { kernel, .. }, LayerGrad::Cp { lambdas, factors })
        | (LayerSpec::FcCp { kernel, .. }, LayerGrad::Cp { lambdas, factors }) => {
            let r = kernel.width();
            for c in 0..r {
                for mode in kernel.modes.iter_mut() {
                    let f = &mut mode.factors[c];
                    let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n == 0.0 {
                        // Collapsed factor: dead component, pinned at λ=0.
                        f[0] = 1.0;
                        kernel.lambdas[c] = 0.0;
                    } else {
                        f.iter_mut().for_each(|x| *x /= n);
                        kernel.lambdas[c] *= n;
                    }
                }
                if kernel.lambdas[c] < 0.0 {
                    kernel.lambdas[c] = -kernel.lambdas[c];
                    kernel.modes[0].factors[c].iter_mut().for_each(|x| *x = -*x);
                    lambdas[c] = -lambdas[c];
                    factors[0][c].iter_mut().for_each(|x| *x = -*x);
                }
            }
            let mut order: Vec<usize> = (0..r).collect();
            order.sort_by(|&i, &j| kernel.lambdas[j].partial_cmp(&kernel.lambdas[i]).unwrap());
            if order.windows(2).any(|w| w[0] > w[1]) {
                kernel.lambdas = order.iter().map(|&i| kernel.lambdas[i]).collect();
                for mode in kernel.modes.iter_mut() {
                    mode.factors = order.iter().map(|&i| mode.factors[i].clone()).collect();
                }
                *lambdas = order.iter().map(|&i| lambdas[i]).collect();
                for gm in factors.iter_mut() {
                    *gm = order.iter().map(|&i| gm[i].clone()).collect();
                }
            }
        }
        (LayerSpec::Skip { inner }, LayerGrad::Skip(v)) => renormalize(inner, v),
        _ => {}
    }
}

/// Deterministic mini-batch SGD with momentum and weight decay on the
/// softmax cross-entropy of the network scores.
pub fn train(
    model: &NetworkModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(NetworkModel, Vec<EpochMetrics>)> {
    model.validate()?;
    if dataset.samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(CoreError::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let mut net = model.clone();
    let mut vel: Vec<LayerGrad> = net.layers.iter().map(LayerGrad::zeros_like).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = dataset.samples.len();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = match config.lr_halve_every {
            Some(p) if p > 0 => config.learning_rate / f64::powi(2.0, (epoch / p) as i32),
            _ => config.learning_rate,
        };
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<LayerGrad> =
                net.layers.iter().map(LayerGrad::zeros_like).collect();
            for &i in batch {
                let (x, y) = &dataset.samples[i];
                let (loss, scores, g) = backward(&net, x, *y)?;
                loss_sum += loss;
                let pred = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if pred == *y {
                    correct += 1;
                }
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.accumulate(gi);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.scale(inv);
            }
            for (layer, g) in net.layers.iter().zip(grads.iter_mut()) {
                add_weight_decay(layer, g, config.weight_decay);
            }
            let gn = grads.iter().map(grad_sq).sum::<f64>().sqrt();
            if !gn.is_finite() {
                return Err(CoreError::Diverged { epoch });
            }
            if gn > CLIP_NORM {
                let f = CLIP_NORM / gn;
                for g in grads.iter_mut() {
                    g.scale(f);
                }
            }
            for (v, g) in vel.iter_mut().zip(&grads) {
                v.scale(config.momentum);
                v.accumulate(g);
            }
            for (layer, v) in net.layers.iter_mut().zip(vel.iter_mut()) {
                apply_step(layer, v, lr);
                renormalize(layer, v);
            }
        }
        let avg_loss = loss_sum / m as f64;
        if !avg_loss.is_finite() {
            return Err(CoreError::Diverged { epoch });
        }
        metrics.push(EpochMetrics {
            epoch,
            loss: avg_loss,
            accuracy: correct as f64 / m as f64,
        });
    }
    Ok((net, metrics))
}
