//! Effective-parameter counting for a compression plan and the resulting
//! margin-based generalization bound: L̂_γ + √(d_eff/m), with the leading
//! constant fixed to 1 and log factors omitted (an unscaled complexity
//! term; presentation scaling is left to the consumer).

use crate::compression::CompressionPlan;
use crate::error::{CoreError, Result};
use crate::network::{margin_loss, LayerSpec, NetworkModel};
use crate::properties::TfVariant;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct LayerParamCount {
    pub original: usize,
    pub effective: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub per_layer: Vec<LayerParamCount>,
    pub d_eff: usize,
    pub d_orig: usize,
    pub m: usize,
    pub gamma: f64,
    pub margin_loss: f64,
    /// √(d_eff / m), unscaled.
    pub complexity: f64,
    pub bound: f64,
    pub variant: TfVariant,
}

/// Per-component parameter cost of a layer: s+o+kx·ky+1 for conv,
/// s1+s2+s1'+s2'+1 for FC (both counts include the amplitude).
pub fn per_component_cost(layer: &LayerSpec) -> usize {
    match layer.core() {
        LayerSpec::ConvDense { s, o, kx, ky, .. } | LayerSpec::ConvCp { s, o, kx, ky, .. } => {
            s + o + kx * ky + 1
        }
        LayerSpec::FcDense { s1, s2, s1p, s2p, .. } | LayerSpec::FcCp { s1, s2, s1p, s2p, .. } => {
            s1 + s2 + s1p + s2p + 1
        }
        LayerSpec::Skip { .. } => unreachable!(),
    }
}

/// Dense parameter count of a layer's kernel.
pub fn original_params(layer: &LayerSpec) -> usize {
    match layer.core() {
        LayerSpec::ConvDense { s, o, kx, ky, .. } | LayerSpec::ConvCp { s, o, kx, ky, .. } => {
            s * o * kx * ky
        }
        LayerSpec::FcDense { s1, s2, s1p, s2p, .. } | LayerSpec::FcCp { s1, s2, s1p, s2p, .. } => {
            s1 * s2 * s1p * s2p
        }
        LayerSpec::Skip { .. } => unreachable!(),
    }
}

/// Per-layer effective counts R̂·(per-component cost) plus totals.
pub fn effective_params(
    plan: &CompressionPlan,
    model: &NetworkModel,
) -> Result<Vec<LayerParamCount>> {
    if plan.layers.len() != model.layers.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            model.layers.len()
        )));
    }
    Ok(model
        .layers
        .iter()
        .zip(&plan.layers)
        .map(|(layer, lp)| {
            let original = original_params(layer);
            let effective = lp.r_hat * per_component_cost(layer);
            LayerParamCount {
                original,
                effective,
                ratio: effective as f64 / original as f64,
            }
        })
        .collect())
}

/// Evaluates the bound: empirical margin loss of the ORIGINAL model plus
/// the unscaled complexity term from the plan's effective parameter count.
pub fn generalization_bound(
    model: &NetworkModel,
    samples: &[(DenseTensor, usize)],
    gamma: f64,
    plan: &CompressionPlan,
) -> Result<BoundReport> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty dataset".into()));
    }
    let per_layer = effective_params(plan, model)?;
    let d_eff: usize = per_layer.iter().map(|l| l.effective).sum();
    let d_orig: usize = per_layer.iter().map(|l| l.original).sum();
    let m = samples.len();
    let ml = margin_loss(model, samples, gamma)?;
    let complexity = (d_eff as f64 / m as f64).sqrt();
    Ok(BoundReport {
        per_layer,
        d_eff,
        d_orig,
        m,
        gamma,
        margin_loss: ml,
        complexity,
        bound: ml + complexity,
        variant: plan.variant,
    })
}
