//! Rank selection and CP-spectrum truncation with a verified output-error
//! guarantee.
//!
//! Error budget. Writing e_k = ‖X̂^(k)−X^(k)‖_F for the compressed network's
//! activation drift, one compressed layer injects at most (op-norm bound of
//! the pruned remainder)·‖X^(k)‖ and propagates incoming drift through the
//! retained kernel's op-norm bound; ReLU is 1-Lipschitz. For a conv layer
//! both op-norm bounds carry a √(H·W) factor, and converting ‖X^(k)‖ into
//! units of the final output through the cushion chain contributes another
//! √(H·W) per conv layer (the cushion definition divides ‖M‖_F by √(H·W)).
//! The per-layer budget factors are therefore
//!     inject(k)    = hw_k · rf_k · nb^(k) / (lc_k · ‖M^(k)‖_F)
//!     propagate(l) = hw_l · tf^(l) / (lc_l · ‖M^(l)‖_F)
//! with hw = H·W for conv layers and 1 (and rf ≤ 1 present) for FC layers;
//! a skip wrapper adds the identity branch, replacing tf by tf + 1/√(hw).
//! Choosing each layer's rank so its term is ≤ ε/n makes the total relative
//! output error ≤ ε, which `compress` verifies sample by sample.

use crate::error::{CoreError, Result};
use crate::network::{forward, LayerSpec, NetworkModel};
use crate::properties::{measure_properties, PropertyTable, TfVariant};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub r_hat: usize,
    /// Condition sides recorded at the chosen rank.
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct CompressionPlan {
    pub layers: Vec<LayerPlan>,
    pub epsilon: f64,
    pub variant: TfVariant,
    pub skip_aware: bool,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub epsilon: f64,
    /// ε before clamping to (0, 1], when derived from a margin.
    pub epsilon_raw: f64,
    pub max_residual: f64,
    pub worst_sample: usize,
    pub samples: usize,
}

/// Propagation factor of an already-decided deeper layer.
fn propagate_factor(
    table: &PropertyTable,
    plan: &[usize],
    i: usize,
    variant: TfVariant,
    skip_aware: bool,
) -> f64 {
    let p = &table.layers[i];
    let mut tf = p.tf(plan[i], variant);
    if skip_aware && p.is_skip {
        tf += 1.0 / (p.hw as f64).sqrt();
    }
    tf * p.hw as f64 / (p.lc * p.frob)
}

fn rank_select(
    model: &NetworkModel,
    table: &PropertyTable,
    epsilon: f64,
    variant: TfVariant,
    skip_aware: bool,
) -> Result<CompressionPlan> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "ε must lie in (0, 1], got {epsilon}"
        )));
    }
    let n = model.layers.len();
    if table.layers.len() != n {
        return Err(CoreError::ShapeMismatch(
            "property table does not match model".into(),
        ));
    }
    for (k, p) in table.layers.iter().enumerate() {
        if !(p.lc > 0.0) || !(p.frob > 0.0) {
            return Err(CoreError::Infeasible {
                layer: k,
                msg: format!("lc = {}, ‖M‖_F = {}", p.lc, p.frob),
            });
        }
    }
    let budget = epsilon / n as f64;
    let mut r_hat = vec![0usize; n];
    let mut sides = vec![(0.0f64, 0.0f64); n];
    // Back to front: deeper layers' factors are evaluated at their chosen
    // ranks.
    for k in (0..n).rev() {
        let p = &table.layers[k];
        let mut deeper = 1.0f64;
        for i in (k + 1)..n {
            deeper *= propagate_factor(table, &r_hat, i, variant, skip_aware);
        }
        let inject_scale = p.rf.unwrap_or(1.0) * p.hw as f64 / (p.lc * p.frob);
        let width = p.width();
        let mut chosen = width;
        for j in 1..=width {
            let lhs = p.nb(j, variant) * inject_scale * deeper;
            if lhs <= budget {
                chosen = j;
                break;
            }
        }
        let lhs = p.nb(chosen, variant) * inject_scale * deeper;
        r_hat[k] = chosen;
        sides[k] = (lhs, budget);
    }
    Ok(CompressionPlan {
        layers: r_hat
            .iter()
            .zip(&sides)
            .map(|(&r, &(lhs, rhs))| LayerPlan { r_hat: r, lhs, rhs })
            .collect(),
        epsilon,
        variant,
        skip_aware,
    })
}

/// Back-to-front rank selection for conv (and mixed) networks.
pub fn fbrc(
    model: &NetworkModel,
    table: &PropertyTable,
    epsilon: f64,
    variant: TfVariant,
) -> Result<CompressionPlan> {
    rank_select(model, table, epsilon, variant, false)
}

/// Rank selection for FC networks; the reshaping factor enters each layer's
/// injection term. Same engine as `fbrc` — FC layers carry rf and hw = 1.
pub fn fbr_fc(
    model: &NetworkModel,
    table: &PropertyTable,
    epsilon: f64,
    variant: TfVariant,
) -> Result<CompressionPlan> {
    rank_select(model, table, epsilon, variant, false)
}

/// Skip-aware variant: every skip layer's propagation factor gains the
/// identity branch.
pub fn fbrc_skip(
    model: &NetworkModel,
    table: &PropertyTable,
    epsilon: f64,
    variant: TfVariant,
) -> Result<CompressionPlan> {
    rank_select(model, table, epsilon, variant, true)
}

/// Amplitude-threshold plan: each layer's spectrum is normalized by its
/// largest amplitude and components strictly below τ are dropped. τ = 0
/// keeps everything.
pub fn threshold_plan(model: &NetworkModel, tau: f64) -> Result<CompressionPlan> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::InvalidArgument(format!(
            "threshold must lie in [0, 1], got {tau}"
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate() {
        let kernel = layer.cp_kernel().ok_or_else(|| CoreError::Layer {
            layer: k,
            msg: "threshold pruning requires CP layers; decompose first".into(),
        })?;
        let top = kernel.lambdas.first().copied().unwrap_or(0.0);
        let kept = if top == 0.0 {
            kernel.width()
        } else {
            kernel
                .lambdas
                .iter()
                .filter(|&&l| l / top >= tau)
                .count()
                .max(1)
        };
        layers.push(LayerPlan {
            r_hat: kept,
            lhs: tau,
            rhs: tau,
        });
    }
    Ok(CompressionPlan {
        layers,
        epsilon: f64::NAN,
        variant: TfVariant::PerFrequency,
        skip_aware: false,
    })
}

fn project_layer(layer: &LayerSpec, r_hat: usize) -> Result<LayerSpec> {
    match layer {
        LayerSpec::ConvCp { s, o, kx, ky, kernel } => Ok(LayerSpec::ConvCp {
            s: *s,
            o: *o,
            kx: *kx,
            ky: *ky,
            kernel: kernel.truncate(r_hat)?,
        }),
        LayerSpec::FcCp {
            s1,
            s2,
            s1p,
            s2p,
            kernel,
        } => Ok(LayerSpec::FcCp {
            s1: *s1,
            s2: *s2,
            s1p: *s1p,
            s2p: *s2p,
            kernel: kernel.truncate(r_hat)?,
        }),
        LayerSpec::Skip { inner } => Ok(LayerSpec::Skip {
            inner: Box::new(project_layer(inner, r_hat)?),
        }),
        LayerSpec::ConvDense { .. } | LayerSpec::FcDense { .. } => Err(
            CoreError::InvalidArgument("cannot project a dense layer; decompose first".into()),
        ),
    }
}

/// Truncates each layer's CP spectrum to the planned rank.
pub fn project(model: &NetworkModel, plan: &CompressionPlan) -> Result<NetworkModel> {
    if plan.layers.len() != model.layers.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            model.layers.len()
        )));
    }
    let layers: Result<Vec<LayerSpec>> = model
        .layers
        .iter()
        .zip(&plan.layers)
        .map(|(l, p)| project_layer(l, p.r_hat))
        .collect();
    Ok(NetworkModel {
        layers: layers?,
        input_shape: model.input_shape.clone(),
    })
}

/// Max relative deviation of the final outputs of two models over a dataset.
pub fn output_residual(
    original: &NetworkModel,
    compressed: &NetworkModel,
    samples: &[(DenseTensor, usize)],
) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut worst_idx = 0usize;
    for (i, (x, _)) in samples.iter().enumerate() {
        let (_, t1) = forward(original, x)?;
        let (_, t2) = forward(compressed, x)?;
        let base = t1.final_output().frobenius_norm();
        let dev = t1
            .final_output()
            .sub(t2.final_output())?
            .frobenius_norm();
        let rel = if base > 0.0 { dev / base } else { dev };
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    Ok((worst, worst_idx))
}

/// End-to-end compression: measure → ε from the margin → rank-select →
/// project → verify the ε-guarantee on every training sample. Verification
/// failure is a hard error (the budget derivation guarantees it holds).
pub fn compress(
    model: &NetworkModel,
    samples: &[(DenseTensor, usize)],
    gamma: f64,
    variant: TfVariant,
    skip_aware: bool,
) -> Result<(NetworkModel, CompressionPlan, VerificationReport)> {
    if gamma <= 0.0 {
        return Err(CoreError::InvalidArgument("γ must be positive".into()));
    }
    let table = measure_properties(model, samples)?;
    if table.max_output_norm == 0.0 {
        return Err(CoreError::InvalidArgument(
            "zero output norm on every sample; ε undefined".into(),
        ));
    }
    let epsilon_raw = gamma / (2.0 * table.max_output_norm);
    let epsilon = epsilon_raw.min(1.0);
    compress_with_epsilon(model, samples, &table, epsilon, epsilon_raw, variant, skip_aware)
}

/// Compression at an explicitly chosen ε ∈ (0, 1].
pub fn compress_epsilon(
    model: &NetworkModel,
    samples: &[(DenseTensor, usize)],
    epsilon: f64,
    variant: TfVariant,
    skip_aware: bool,
) -> Result<(NetworkModel, CompressionPlan, VerificationReport)> {
    let table = measure_properties(model, samples)?;
    compress_with_epsilon(model, samples, &table, epsilon, epsilon, variant, skip_aware)
}

fn compress_with_epsilon(
    model: &NetworkModel,
    samples: &[(DenseTensor, usize)],
    table: &PropertyTable,
    epsilon: f64,
    epsilon_raw: f64,
    variant: TfVariant,
    skip_aware: bool,
) -> Result<(NetworkModel, CompressionPlan, VerificationReport)> {
    let plan = rank_select(model, table, epsilon, variant, skip_aware)?;
    let compressed = project(model, &plan)?;
    let (max_residual, worst_sample) = output_residual(model, &compressed, samples)?;
    if max_residual > epsilon {
        return Err(CoreError::VerificationFailed {
            sample: worst_sample,
            residual: max_residual,
            epsilon,
        });
    }
    Ok((
        compressed,
        plan,
        VerificationReport {
            epsilon,
            epsilon_raw,
            max_residual,
            worst_sample,
            samples: samples.len(),
        },
    ))
}

/// Measured drift vs the per-depth budget: for every prefix depth m, checks
/// ‖X̂^(m)−X^(m)‖_F ≤ (Σ_{k<m} inject(k) Π_{k<l<m} propagate(l))·‖X^(m)‖_F
/// on every sample. Returns, per depth, the worst measured/allowed ratio
/// (≤ 1 everywhere when the chain holds).
pub fn verify_chain(
    original: &NetworkModel,
    compressed: &NetworkModel,
    table: &PropertyTable,
    plan: &CompressionPlan,
    samples: &[(DenseTensor, usize)],
) -> Result<Vec<f64>> {
    let n = original.layers.len();
    // Per-layer budget factors at the chosen ranks.
    let inject: Vec<f64> = (0..n)
        .map(|k| {
            let p = &table.layers[k];
            p.nb(plan.layers[k].r_hat, plan.variant) * p.rf.unwrap_or(1.0) * p.hw as f64
                / (p.lc * p.frob)
        })
        .collect();
    let ranks: Vec<usize> = plan.layers.iter().map(|l| l.r_hat).collect();
    let prop: Vec<f64> = (0..n)
        .map(|l| propagate_factor(table, &ranks, l, plan.variant, plan.skip_aware))
        .collect();
    // bound[m] for drift measured entering depth m (m = 1..=n measures the
    // input to layer m; m = n measures the final output).
    let mut bounds = vec![0.0f64; n + 1];
    for m in 1..=n {
        let mut acc = 0.0;
        for k in 0..m {
            let mut term = inject[k];
            for l in (k + 1)..m {
                term *= prop[l];
            }
            acc += term;
        }
        bounds[m] = acc;
    }
    let mut worst = vec![0.0f64; n + 1];
    for (x, _) in samples {
        let (_, t1) = forward(original, x)?;
        let (_, t2) = forward(compressed, x)?;
        for m in 1..=n {
            let (a, b, base) = if m < n {
                (&t1.inputs[m], &t2.inputs[m], t1.inputs[m].frobenius_norm())
            } else {
                (
                    t1.final_output(),
                    t2.final_output(),
                    t1.final_output().frobenius_norm(),
                )
            };
            let drift = a.sub(b)?.frobenius_norm();
            let allowed = bounds[m] * base;
            let ratio = if allowed > 0.0 {
                drift / allowed
            } else if drift == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            if ratio > worst[m] {
                worst[m] = ratio;
            }
        }
    }
    Ok(worst[1..].to_vec())
}
