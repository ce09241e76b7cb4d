//! Unitary multidimensional DFT over selected axes, circular 2D convolution,
//! and the exact Fourier-domain operator norm of a convolution kernel.
//!
//! Conventions fixed here and relied on everywhere else:
//! - the transform over a set of axes carries normalization (Π N_l)^{-1/2},
//!   making it unitary;
//! - convolution is circular (indices mod H, W) — the convolution theorem is
//!   exact only under this model;
//! - kernels are anchored at spatial index (0,0) when embedded into the H×W
//!   grid, fixing the phase of the spectral amplitudes.

use crate::error::{CoreError, Result};
use crate::tensor::{complex_matrix_spectral_norm, ComplexTensor, DenseTensor};
use num_complex::Complex64;

fn validate_dims(shape_len: usize, dims: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape_len];
    for &d in dims {
        if d >= shape_len {
            return Err(CoreError::InvalidArgument(format!(
                "axis {d} out of range for order-{shape_len} tensor"
            )));
        }
        if seen[d] {
            return Err(CoreError::InvalidArgument(format!("axis {d} repeated")));
        }
        seen[d] = true;
    }
    Ok(())
}

/// One unidimensional DFT along `axis`, normalized by 1/√N. `sign` is the
/// exponent sign: -1 forward, +1 inverse.
fn dft_axis(t: &ComplexTensor, axis: usize, sign: f64) -> ComplexTensor {
    let n = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let outer: usize = t.shape[..axis].iter().product();
    let scale = 1.0 / (n as f64).sqrt();
    // Twiddle table: w[k] = exp(sign·2πi·k/n)/√n for k in 0..n.
    let mut tw = Vec::with_capacity(n);
    for k in 0..n {
        let ang = sign * 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
        tw.push(Complex64::new(ang.cos(), ang.sin()) * scale);
    }
    let mut out = ComplexTensor::zeros(&t.shape);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for f in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    acc += t.data[base + j * inner] * tw[(f * j) % n];
                }
                out.data[base + f * inner] = acc;
            }
        }
    }
    out
}

/// Unitary MDFT over the listed axes (separable: applied one axis at a time).
pub fn mdft(t: &ComplexTensor, dims: &[usize]) -> Result<ComplexTensor> {
    validate_dims(t.shape.len(), dims)?;
    let mut cur = t.clone();
    for &d in dims {
        cur = dft_axis(&cur, d, -1.0);
    }
    Ok(cur)
}

/// Inverse of `mdft` (adjoint of a unitary transform).
pub fn imdft(t: &ComplexTensor, dims: &[usize]) -> Result<ComplexTensor> {
    validate_dims(t.shape.len(), dims)?;
    let mut cur = t.clone();
    for &d in dims {
        cur = dft_axis(&cur, d, 1.0);
    }
    Ok(cur)
}

pub fn mdft_real(t: &DenseTensor, dims: &[usize]) -> Result<ComplexTensor> {
    mdft(&ComplexTensor::from_real(t), dims)
}

/// Circular 2D convolution. `x` is H×W×S, `m` is kx×ky×T×S with kx ≤ H,
/// ky ≤ W; output is H×W×T:
///   Y[i,j,t] = Σ_s Σ_{p,q} M[(i−p) mod H, (j−q) mod W, t, s] · X[p,q,s]
pub fn conv2d_circular(x: &DenseTensor, m: &DenseTensor) -> Result<DenseTensor> {
    if x.shape.len() != 3 || m.shape.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "conv2d_circular expects H×W×S input and kx×ky×T×S kernel, got {:?} and {:?}",
            x.shape, m.shape
        )));
    }
    let (h, w, s) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kx, ky, t, ks) = (m.shape[0], m.shape[1], m.shape[2], m.shape[3]);
    if ks != s {
        return Err(CoreError::ShapeMismatch(format!(
            "input has {s} channels, kernel expects {ks}"
        )));
    }
    if kx > h || ky > w {
        return Err(CoreError::ShapeMismatch(format!(
            "kernel {kx}×{ky} larger than grid {h}×{w}"
        )));
    }
    let mut y = DenseTensor::zeros(&[h, w, t]);
    for p in 0..h {
        for q in 0..w {
            let xbase = (p * w + q) * s;
            for dx in 0..kx {
                let i = (p + dx) % h;
                for dy in 0..ky {
                    let j = (q + dy) % w;
                    let ybase = (i * w + j) * t;
                    let mbase = (dx * ky + dy) * t * s;
                    for tt in 0..t {
                        let mut acc = 0.0;
                        let mrow = mbase + tt * s;
                        for ss in 0..s {
                            acc += m.data[mrow + ss] * x.data[xbase + ss];
                        }
                        y.data[ybase + tt] += acc;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Embeds a kx×ky×T×S kernel into the H×W grid (anchor (0,0)) and returns
/// its unitary spatial transform, shape H×W×T×S.
pub fn kernel_spectrum(m: &DenseTensor, h: usize, w: usize) -> Result<ComplexTensor> {
    let (kx, ky, t, s) = (m.shape[0], m.shape[1], m.shape[2], m.shape[3]);
    if kx > h || ky > w {
        return Err(CoreError::ShapeMismatch(format!(
            "kernel {kx}×{ky} larger than grid {h}×{w}"
        )));
    }
    let mut emb = DenseTensor::zeros(&[h, w, t, s]);
    for dx in 0..kx {
        for dy in 0..ky {
            for tt in 0..t {
                for ss in 0..s {
                    emb.set(&[dx, dy, tt, ss], m.get(&[dx, dy, tt, ss]));
                }
            }
        }
    }
    mdft_real(&emb, &[0, 1])
}

/// Exact operator norm of the circular convolution with kernel `m` on an
/// H×W grid: √(HW) · max over frequencies of the spectral norm of the T×S
/// frequency-slice matrix.
pub fn conv_operator_norm_exact(m: &DenseTensor, h: usize, w: usize) -> Result<f64> {
    let spec = kernel_spectrum(m, h, w)?;
    let (t, s) = (m.shape[2], m.shape[3]);
    let mut best = 0.0f64;
    let mut slice = vec![Complex64::new(0.0, 0.0); t * s];
    for f in 0..h {
        for g in 0..w {
            let base = (f * w + g) * t * s;
            slice.copy_from_slice(&spec.data[base..base + t * s]);
            let sn = complex_matrix_spectral_norm(&slice, t, s);
            if sn > best {
                best = sn;
            }
        }
    }
    Ok(((h * w) as f64).sqrt() * best)
}

/// Spectral amplitudes |C̃^{(f,g)}| of a single-channel kx×ky filter on an
/// H×W grid, as a flat H·W vector of magnitudes.
pub fn filter_amplitudes(c: &[f64], kx: usize, ky: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if kx > h || ky > w {
        return Err(CoreError::ShapeMismatch(format!(
            "filter {kx}×{ky} larger than grid {h}×{w}"
        )));
    }
    let mut emb = DenseTensor::zeros(&[h, w]);
    for dx in 0..kx {
        for dy in 0..ky {
            emb.set(&[dx, dy], c[dx * ky + dy]);
        }
    }
    let spec = mdft_real(&emb, &[0, 1])?;
    Ok(spec.data.iter().map(|z| z.norm()).collect())
}
