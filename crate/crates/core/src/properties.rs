//! Data-dependent per-layer compressibility properties measured on a model
//! plus a training set: tensorization factors tf_j, tensor noise bounds
//! nb_j, layer cushions lc, reshaping factors rf (FC), weight Frobenius
//! norms, and the dataset-wide maximum output norm.
//!
//! Two spectral-weighting variants are computed for tf/nb on conv layers:
//! per-frequency (max over frequency of the summed spectrum — tighter) and
//! per-component (sum of per-component frequency maxima). Both are valid
//! operator-norm bounds; per-frequency is the default consumer choice.

use crate::error::{CoreError, Result};
use crate::fourier::filter_amplitudes;
use crate::network::{conv_cp_modes, forward, LayerSpec, NetworkModel};
use crate::tensor::{matrix_spectral_norm, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfVariant {
    PerFrequency,
    PerComponent,
}

#[derive(Debug, Clone)]
pub struct LayerProperties {
    /// tf_j for j = 1..=R at index j−1, per-frequency variant.
    pub tf_pf: Vec<f64>,
    /// tf_j, per-component variant.
    pub tf_pc: Vec<f64>,
    /// nb_j for j = 0..=R at index j, per-frequency variant. nb_R == 0.
    pub nb_pf: Vec<f64>,
    /// nb_j, per-component variant.
    pub nb_pc: Vec<f64>,
    /// Layer cushion: minimum over the dataset of the defining ratio.
    pub lc: f64,
    /// Reshaping factor, FC layers only.
    pub rf: Option<f64>,
    /// ‖M^(k)‖_F of the weight kernel.
    pub frob: f64,
    /// Spatial grid size H·W for conv layers, 1 for FC.
    pub hw: usize,
    pub is_conv: bool,
    pub is_skip: bool,
    /// Samples excluded from the cushion minimum because ‖X^(k)‖ was zero.
    pub excluded_samples: usize,
}

impl LayerProperties {
    pub fn width(&self) -> usize {
        self.tf_pf.len()
    }

    pub fn tf(&self, j: usize, variant: TfVariant) -> f64 {
        match variant {
            TfVariant::PerFrequency => self.tf_pf[j - 1],
            TfVariant::PerComponent => self.tf_pc[j - 1],
        }
    }

    pub fn nb(&self, j: usize, variant: TfVariant) -> f64 {
        match variant {
            TfVariant::PerFrequency => self.nb_pf[j],
            TfVariant::PerComponent => self.nb_pc[j],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyTable {
    pub layers: Vec<LayerProperties>,
    /// max over the dataset of ‖M(X)‖_F (final pre-activation output).
    pub max_output_norm: f64,
}

/// tf/nb spectra of a single CP layer. Conv layers weight each component by
/// its spectral amplitudes on the H×W grid; FC layers use the plain
/// amplitude sums (both variants coincide).
pub fn layer_spectra(
    layer: &LayerSpec,
    h: usize,
    w: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let core = layer.core();
    let kernel = core.cp_kernel().ok_or_else(|| {
        CoreError::InvalidArgument(
            "properties require CP layers; decompose dense layers first".into(),
        )
    })?;
    let r = kernel.width();
    match core {
        LayerSpec::ConvCp { kx, ky, .. } => {
            let (_, _, cm) = conv_cp_modes(kernel)?;
            // amps[r] = |C̃_r^{(f,g)}| over the flat frequency grid
            let amps: Vec<Vec<f64>> = (0..r)
                .map(|c| filter_amplitudes(&cm.factors[c], *kx, *ky, h, w))
                .collect::<Result<_>>()?;
            let grid = h * w;
            // Per-frequency: running weighted sums per frequency, max'd.
            let mut tf_pf = Vec::with_capacity(r);
            let mut run = vec![0.0f64; grid];
            for c in 0..r {
                for (acc, &a) in run.iter_mut().zip(&amps[c]) {
                    *acc += kernel.lambdas[c] * a;
                }
                tf_pf.push(run.iter().fold(0.0f64, |m, &v| m.max(v)));
            }
            let mut nb_pf = Vec::with_capacity(r + 1);
            for j in 0..=r {
                let mut tail = vec![0.0f64; grid];
                for c in j..r {
                    for (acc, &a) in tail.iter_mut().zip(&amps[c]) {
                        *acc += kernel.lambdas[c] * a;
                    }
                }
                nb_pf.push(tail.iter().fold(0.0f64, |m, &v| m.max(v)));
            }
            // Per-component: partial sums of λ_c · max_{f,g}|C̃_c|.
            let peak: Vec<f64> = amps
                .iter()
                .map(|a| a.iter().fold(0.0f64, |m, &v| m.max(v)))
                .collect();
            let mut tf_pc = Vec::with_capacity(r);
            let mut acc = 0.0;
            for c in 0..r {
                acc += kernel.lambdas[c] * peak[c];
                tf_pc.push(acc);
            }
            let total = acc;
            let mut nb_pc = Vec::with_capacity(r + 1);
            let mut head = 0.0;
            nb_pc.push(total);
            for c in 0..r {
                head += kernel.lambdas[c] * peak[c];
                nb_pc.push((total - head).max(0.0));
            }
            Ok((tf_pf, tf_pc, nb_pf, nb_pc))
        }
        LayerSpec::FcCp { .. } => {
            let mut tf = Vec::with_capacity(r);
            let mut acc = 0.0;
            for c in 0..r {
                acc += kernel.lambdas[c];
                tf.push(acc);
            }
            let total = acc;
            let mut nb = Vec::with_capacity(r + 1);
            let mut head = 0.0;
            nb.push(total);
            for c in 0..r {
                head += kernel.lambdas[c];
                nb.push((total - head).max(0.0));
            }
            Ok((tf.clone(), tf, nb.clone(), nb))
        }
        _ => unreachable!("core() strips skip and cp_kernel filtered dense"),
    }
}

/// Measures every property over the dataset. Activations are traced once
/// per sample; the cushion of layer k compares ‖X^(k+1)‖ (the next layer's
/// post-activation input; the final pre-activation for the last layer)
/// against ‖M^(k)‖_F·‖X^(k)‖, scaled by √(H·W) for conv layers.
pub fn measure_properties(
    model: &NetworkModel,
    samples: &[(DenseTensor, usize)],
) -> Result<PropertyTable> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty dataset".into()));
    }
    model.validate()?;
    let n = model.layers.len();
    let (h, w) = model.grid();

    let mut layers: Vec<LayerProperties> = Vec::with_capacity(n);
    for layer in &model.layers {
        let is_conv = layer.is_conv();
        let (tf_pf, tf_pc, nb_pf, nb_pc) = layer_spectra(layer, h, w)?;
        layers.push(LayerProperties {
            tf_pf,
            tf_pc,
            nb_pf,
            nb_pc,
            lc: f64::INFINITY,
            rf: if is_conv { None } else { Some(0.0) },
            frob: layer.weight_frobenius(),
            hw: if is_conv { h * w } else { 1 },
            is_conv,
            is_skip: layer.is_skip(),
            excluded_samples: 0,
        });
    }

    let mut max_out = 0.0f64;
    for (x, _) in samples {
        let (_, trace) = forward(model, x)?;
        max_out = max_out.max(trace.final_output().frobenius_norm());
        for k in 0..n {
            let in_norm = trace.input_norm(k);
            let out_norm = if k + 1 < n {
                trace.input_norm(k + 1)
            } else {
                trace.final_output().frobenius_norm()
            };
            let p = &mut layers[k];
            if in_norm == 0.0 {
                p.excluded_samples += 1;
            } else if p.frob > 0.0 {
                let scale = if p.is_conv { (p.hw as f64).sqrt() } else { 1.0 };
                let ratio = scale * out_norm / (p.frob * in_norm);
                if ratio < p.lc {
                    p.lc = ratio;
                }
            }
            if !p.is_conv {
                // reshaping factor: spectral / Frobenius of the matricized
                // layer input
                let xin = &trace.inputs[k];
                let fro = in_norm;
                if fro > 0.0 {
                    let spec =
                        matrix_spectral_norm(&xin.data, xin.shape[0], xin.shape[1]) / fro;
                    let rf = p.rf.get_or_insert(0.0);
                    if spec > *rf {
                        *rf = spec;
                    }
                }
            }
        }
    }
    for (k, p) in layers.iter_mut().enumerate() {
        if p.frob == 0.0 {
            return Err(CoreError::Layer {
                layer: k,
                msg: "zero weight norm; cushion undefined".into(),
            });
        }
        if !p.lc.is_finite() {
            return Err(CoreError::Layer {
                layer: k,
                msg: "every sample had zero input norm; cushion undefined".into(),
            });
        }
    }
    Ok(PropertyTable {
        layers,
        max_output_norm: max_out,
    })
}

/// Max over the dataset of the final-output Frobenius norm.
pub fn max_output_norm(model: &NetworkModel, samples: &[(DenseTensor, usize)]) -> Result<f64> {
    let mut best = 0.0f64;
    for (x, _) in samples {
        let (_, trace) = forward(model, x)?;
        best = best.max(trace.final_output().frobenius_norm());
    }
    Ok(best)
}
