//! CP (polyadic) kernels: a width-R sum of rank-1 outer products with
//! nonnegative, descending amplitudes and unit-norm factors. Modes may group
//! several contiguous tensor axes (spatial kx×ky filters, channel-pair
//! matrices); a grouped mode's factor is its flattened block with unit
//! Frobenius norm.

use crate::error::{CoreError, Result};
use crate::fourier::filter_amplitudes;
use crate::tensor::{sym_eig, DenseTensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CpMode {
    /// Axis sizes this mode covers (one entry for a vector mode, two for a
    /// grouped spatial/matrix mode).
    pub dims: Vec<usize>,
    /// One flattened factor per component, each of length dims.product(),
    /// unit norm after `normalize`.
    pub factors: Vec<Vec<f64>>,
}

impl CpMode {
    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpKernel {
    pub lambdas: Vec<f64>,
    pub modes: Vec<CpMode>,
}

impl CpKernel {
    pub fn width(&self) -> usize {
        self.lambdas.len()
    }

    /// Target dense shape: concatenation of the mode axis groups.
    pub fn order_dims(&self) -> Vec<usize> {
        self.modes.iter().flat_map(|m| m.dims.clone()).collect()
    }

    /// Σ_r λ_r · v_1^(r) ⊗ … ⊗ v_N^(r), exact.
    pub fn reconstruct(&self) -> DenseTensor {
        let shape = self.order_dims();
        let mut out = DenseTensor::zeros(&shape);
        for r in 0..self.width() {
            let lam = self.lambdas[r];
            if lam == 0.0 {
                continue;
            }
            // Expand the outer product mode by mode over flattened blocks;
            // contiguous axis grouping keeps this row-major.
            let mut acc = vec![lam];
            for mode in &self.modes {
                let f = &mode.factors[r];
                let mut next = Vec::with_capacity(acc.len() * f.len());
                for &x in &acc {
                    for &y in f {
                        next.push(x * y);
                    }
                }
                acc = next;
            }
            for (o, v) in out.data.iter_mut().zip(&acc) {
                *o += v;
            }
        }
        out
    }

    /// Keeps the R̂ largest-amplitude components (kernel must be normalized,
    /// so components are already sorted).
    pub fn truncate(&self, r_hat: usize) -> Result<CpKernel> {
        if r_hat > self.width() {
            return Err(CoreError::InvalidArgument(format!(
                "truncate rank {r_hat} exceeds width {}",
                self.width()
            )));
        }
        Ok(CpKernel {
            lambdas: self.lambdas[..r_hat].to_vec(),
            modes: self
                .modes
                .iter()
                .map(|m| CpMode {
                    dims: m.dims.clone(),
                    factors: m.factors[..r_hat].to_vec(),
                })
                .collect(),
        })
    }

    /// Frobenius norm of the reconstructed tensor, computed from the CP form
    /// via the Gram matrices of the factors (no densification).
    pub fn frobenius_norm(&self) -> f64 {
        let r = self.width();
        let mut acc = 0.0f64;
        for p in 0..r {
            for q in 0..r {
                let mut inner = self.lambdas[p] * self.lambdas[q];
                for mode in &self.modes {
                    let dot: f64 = mode.factors[p]
                        .iter()
                        .zip(&mode.factors[q])
                        .map(|(a, b)| a * b)
                        .sum();
                    inner *= dot;
                }
                acc += inner;
            }
        }
        acc.max(0.0).sqrt()
    }
}

/// Rebuilds the invariants: unit-norm factors with magnitudes absorbed into
/// λ, signs pushed into the first mode so λ ≥ 0, components sorted by λ
/// descending (stable). Components with a zero factor are dropped; the count
/// of dropped components is returned alongside.
pub fn normalize(lambdas: &[f64], modes: &[CpMode]) -> Result<(CpKernel, usize)> {
    let r = lambdas.len();
    for m in modes {
        if m.factors.len() != r {
            return Err(CoreError::ShapeMismatch(format!(
                "mode has {} factors for width {r}",
                m.factors.len()
            )));
        }
    }
    let mut comps: Vec<(f64, Vec<Vec<f64>>)> = Vec::with_capacity(r);
    let mut dropped = 0usize;
    for i in 0..r {
        let mut lam = lambdas[i];
        let mut facs: Vec<Vec<f64>> = Vec::with_capacity(modes.len());
        let mut zero = false;
        for m in modes {
            let f = &m.factors[i];
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                zero = true;
                break;
            }
            lam *= n;
            facs.push(f.iter().map(|x| x / n).collect());
        }
        if zero || lam == 0.0 {
            dropped += 1;
            continue;
        }
        if lam < 0.0 {
            lam = -lam;
            for x in facs[0].iter_mut() {
                *x = -*x;
            }
        }
        comps.push((lam, facs));
    }
    // Stable descending sort keeps original order among equal amplitudes.
    comps.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let lam_out: Vec<f64> = comps.iter().map(|c| c.0).collect();
    let modes_out: Vec<CpMode> = modes
        .iter()
        .enumerate()
        .map(|(j, m)| CpMode {
            dims: m.dims.clone(),
            factors: comps.iter().map(|c| c.1[j].clone()).collect(),
        })
        .collect();
    Ok((
        CpKernel {
            lambdas: lam_out,
            modes: modes_out,
        },
        dropped,
    ))
}

/// Admissible CP width for a grouped shape: for each mode, the product of
/// the other modes' sizes is an upper bound on the attainable rank.
pub fn rank_cap(group_sizes: &[usize]) -> usize {
    let total: usize = group_sizes.iter().product();
    group_sizes
        .iter()
        .map(|&d| total / d)
        .min()
        .unwrap_or(0)
}

/// CP decomposition by alternating least squares over grouped modes.
///
/// `mode_grouping` partitions the tensor axes into contiguous, in-order
/// groups (e.g. conv o×s×kx×ky as [[0],[1],[2,3]]). Returns the normalized
/// kernel and the relative reconstruction error ‖T−recon‖_F/‖T‖_F.
/// Deterministic for a fixed seed; stops when the error improves by less
/// than `tol` between sweeps or after `max_iter` sweeps.
pub fn cp_als(
    t: &DenseTensor,
    r: usize,
    mode_grouping: &[Vec<usize>],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(CpKernel, f64)> {
    if r == 0 {
        return Err(CoreError::InvalidArgument("rank must be ≥ 1".into()));
    }
    if !t.all_finite() {
        return Err(CoreError::NonFinite("cp_als input".into()));
    }
    // Validate the grouping: contiguous ascending partition of all axes.
    let mut next_axis = 0usize;
    let mut group_dims: Vec<Vec<usize>> = Vec::new();
    for g in mode_grouping {
        if g.is_empty() {
            return Err(CoreError::InvalidArgument("empty mode group".into()));
        }
        let mut dims = Vec::new();
        for &ax in g {
            if ax != next_axis {
                return Err(CoreError::InvalidArgument(
                    "mode grouping must partition axes contiguously in order".into(),
                ));
            }
            if ax >= t.shape.len() {
                return Err(CoreError::InvalidArgument(format!(
                    "axis {ax} out of range"
                )));
            }
            dims.push(t.shape[ax]);
            next_axis += 1;
        }
        group_dims.push(dims);
    }
    if next_axis != t.shape.len() {
        return Err(CoreError::InvalidArgument(
            "mode grouping must cover every axis".into(),
        ));
    }
    let sizes: Vec<usize> = group_dims.iter().map(|d| d.iter().product()).collect();
    let cap = rank_cap(&sizes);
    if r > cap {
        return Err(CoreError::RankCap {
            requested: r,
            cap,
        });
    }

    let tnorm = t.frobenius_norm();
    let n_modes = sizes.len();
    if tnorm == 0.0 {
        // Zero tensor: a zero-amplitude kernel with arbitrary unit factors.
        let modes = group_dims
            .iter()
            .zip(&sizes)
            .map(|(dims, &sz)| CpMode {
                dims: dims.clone(),
                factors: (0..r)
                    .map(|_| {
                        let mut f = vec![0.0; sz];
                        f[0] = 1.0;
                        f
                    })
                    .collect(),
            })
            .collect();
        return Ok((
            CpKernel {
                lambdas: vec![0.0; r],
                modes,
            },
            0.0,
        ));
    }

    // Factor matrices a[i]: sizes[i] × r, column-major by component for
    // cheap per-component access: a[i][c][row]. Initialized from the leading
    // eigenvectors of each mode unfolding's Gram matrix (HOSVD-style), which
    // avoids most ALS swamps; components beyond the mode size fall back to
    // seeded random unit vectors.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_modes);
    {
        // Per-mode row index of each entry, needed to build the unfoldings.
        let mut idx = vec![0usize; n_modes];
        let mut rows: Vec<Vec<u32>> = vec![Vec::with_capacity(t.data.len()); n_modes];
        for _ in 0..t.data.len() {
            for (i, &ix) in idx.iter().enumerate() {
                rows[i].push(ix as u32);
            }
            for i in (0..n_modes).rev() {
                idx[i] += 1;
                if idx[i] < sizes[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        for (i, &sz) in sizes.iter().enumerate() {
            // Gram of the mode-i unfolding: G[p][q] = Σ over entries sharing
            // column index of X[p,·]·X[q,·]; accumulated directly.
            let cols = t.data.len() / sz;
            let mut unfold = vec![0.0f64; sz * cols];
            let mut col_count = vec![0usize; sz];
            for (off, &tv) in t.data.iter().enumerate() {
                let row = rows[i][off] as usize;
                unfold[row * cols + col_count[row]] = tv;
                col_count[row] += 1;
            }
            let mut gram = vec![0.0f64; sz * sz];
            for p in 0..sz {
                for q in p..sz {
                    let mut s = 0.0;
                    for k in 0..cols {
                        s += unfold[p * cols + k] * unfold[q * cols + k];
                    }
                    gram[p * sz + q] = s;
                    gram[q * sz + p] = s;
                }
            }
            let (_, vecs) = sym_eig(&gram, sz);
            let mut factors: Vec<Vec<f64>> = Vec::with_capacity(r);
            for c in 0..r {
                let f: Vec<f64> = if c < sz {
                    (0..sz).map(|k| vecs[k * sz + c]).collect()
                } else {
                    let mut f: Vec<f64> = (0..sz).map(|_| rng.gen::<f64>() - 0.5).collect();
                    let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 0.0 {
                        f.iter_mut().for_each(|x| *x /= n);
                    } else {
                        f[0] = 1.0;
                    }
                    f
                };
                factors.push(f);
            }
            a.push(factors);
        }
    }

    // Precompute each entry's per-mode row index.
    let total = t.data.len();
    let mut mode_idx: Vec<Vec<u32>> = vec![Vec::with_capacity(total); n_modes];
    {
        let mut idx = vec![0usize; n_modes];
        for _off in 0..total {
            for (i, &ix) in idx.iter().enumerate() {
                mode_idx[i].push(ix as u32);
            }
            for i in (0..n_modes).rev() {
                idx[i] += 1;
                if idx[i] < sizes[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
    }

    let recon_err = |a: &Vec<Vec<Vec<f64>>>| -> f64 {
        let mut err2 = 0.0f64;
        for off in 0..total {
            let mut v = 0.0f64;
            for c in 0..r {
                let mut p = 1.0f64;
                for (i, am) in a.iter().enumerate() {
                    p *= am[c][mode_idx[i][off] as usize];
                }
                v += p;
            }
            let d = t.data[off] - v;
            err2 += d * d;
        }
        err2.sqrt() / tnorm
    };

    let als_sweeps = |a: &mut Vec<Vec<Vec<f64>>>| -> Result<f64> {
    let mut err = recon_err(a);
    for _sweep in 0..max_iter {
        for i in 0..n_modes {
            // MTTKRP: g[row][c] = Σ_{entries with mode-i row} T · Π_{j≠i} a_j
            let sz = sizes[i];
            let mut g = vec![0.0f64; sz * r];
            for off in 0..total {
                let tv = t.data[off];
                if tv == 0.0 {
                    continue;
                }
                let row = mode_idx[i][off] as usize;
                for c in 0..r {
                    let mut p = tv;
                    for (j, am) in a.iter().enumerate() {
                        if j != i {
                            p *= am[c][mode_idx[j][off] as usize];
                        }
                    }
                    g[row * r + c] += p;
                }
            }
            // V = ⊙_{j≠i} (A_jᵀA_j), R×R symmetric.
            let mut v = vec![1.0f64; r * r];
            for (j, am) in a.iter().enumerate() {
                if j == i {
                    continue;
                }
                for p in 0..r {
                    for q in 0..r {
                        let dot: f64 = am[p].iter().zip(&am[q]).map(|(x, y)| x * y).sum();
                        v[p * r + q] *= dot;
                    }
                }
            }
            // Ridge keeps the solve well-posed when components collapse.
            let trace: f64 = (0..r).map(|p| v[p * r + p]).sum();
            let ridge = 1e-12 * (trace / r as f64).max(1e-30);
            for p in 0..r {
                v[p * r + p] += ridge;
            }
            // Solve A_i · V = G row by row (V symmetric): Vᵀ x = gᵀ.
            let vinv_rows = solve_multi(&v, r, &g, sz)?;
            for c in 0..r {
                for row in 0..sz {
                    a[i][c][row] = vinv_rows[row * r + c];
                }
            }
        }
        let prev_err = err;
        err = recon_err(a);
        if (prev_err - err).abs() < tol {
            break;
        }
    }
    Ok(err)
    };

    // ALS can stall in a swamp far from the best fit; retry from seeded
    // random initializations and keep the best factors found.
    let mut err = als_sweeps(&mut a)?;
    for _restart in 0..4 {
        if err <= 1e-10 {
            break;
        }
        let mut cand: Vec<Vec<Vec<f64>>> = sizes
            .iter()
            .map(|&sz| {
                (0..r)
                    .map(|_| {
                        let mut f: Vec<f64> =
                            (0..sz).map(|_| rng.gen::<f64>() - 0.5).collect();
                        let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                        f.iter_mut().for_each(|x| *x /= n.max(1e-300));
                        f
                    })
                    .collect()
            })
            .collect();
        let cand_err = als_sweeps(&mut cand)?;
        if cand_err < err {
            a = cand;
            err = cand_err;
        }
    }

    // normalize absorbs the factor-column norms into the amplitudes.
    let lambdas = vec![1.0f64; r];
    let mut modes: Vec<CpMode> = Vec::with_capacity(n_modes);
    for (i, dims) in group_dims.iter().enumerate() {
        modes.push(CpMode {
            dims: dims.clone(),
            factors: (0..r).map(|c| a[i][c].clone()).collect(),
        });
    }
    let (kernel, _dropped) = normalize(&lambdas, &modes)?;
    Ok((kernel, err))
}

/// Solves x·M = b for many right-hand rows: given M (n×n) and B (rows×n),
/// returns X (rows×n) with X·M = B. Gaussian elimination with partial
/// pivoting on Mᵀ.
fn solve_multi(m: &[f64], n: usize, b: &[f64], rows: usize) -> Result<Vec<f64>> {
    // Transpose-solve: M is symmetric in our use, but keep it general.
    let mut lu: Vec<f64> = (0..n * n).map(|k| m[(k % n) * n + k / n]).collect(); // Mᵀ
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[perm[col] * n + col].abs();
        for row in (col + 1)..n {
            let v = lu[perm[row] * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return Err(CoreError::InvalidArgument(
                "singular normal equations in ALS solve".into(),
            ));
        }
        perm.swap(col, piv);
        let prow = perm[col];
        for row in (col + 1)..n {
            let rrow = perm[row];
            let f = lu[rrow * n + col] / lu[prow * n + col];
            lu[rrow * n + col] = f;
            for k in (col + 1)..n {
                lu[rrow * n + k] -= f * lu[prow * n + k];
            }
        }
    }
    let mut out = vec![0.0f64; rows * n];
    let mut y = vec![0.0f64; n];
    for rhs in 0..rows {
        for i in 0..n {
            // forward substitution over permuted rows
            let pi = perm[i];
            let mut v = b[rhs * n + pi];
            for k in 0..i {
                v -= lu[pi * n + k] * y[k];
            }
            y[i] = v;
        }
        for i in (0..n).rev() {
            let pi = perm[i];
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= lu[pi * n + k] * out[rhs * n + k];
            }
            out[rhs * n + i] = v / lu[pi * n + i];
        }
    }
    Ok(out)
}

/// Operator-norm bound for a CP fully-connected kernel: Σ_r λ_r.
pub fn opnorm_bound_fc(k: &CpKernel) -> f64 {
    k.lambdas.iter().sum()
}

/// Operator-norm bound for a CP convolution kernel on an H×W grid:
/// √(HW) · Σ_r λ_r · max_{f,g} |C̃_r^{(f,g)}|, where C̃_r is the unitary
/// spatial transform of the r-th spatial factor embedded at (0,0).
pub fn opnorm_bound_conv(k: &CpKernel, spatial_mode: usize, h: usize, w: usize) -> Result<f64> {
    let mode = k
        .modes
        .get(spatial_mode)
        .ok_or_else(|| CoreError::InvalidArgument("spatial mode out of range".into()))?;
    if mode.dims.len() != 2 {
        return Err(CoreError::InvalidArgument(
            "spatial mode must group two axes".into(),
        ));
    }
    let (kx, ky) = (mode.dims[0], mode.dims[1]);
    let mut acc = 0.0f64;
    for r in 0..k.width() {
        let amps = filter_amplitudes(&mode.factors[r], kx, ky, h, w)?;
        let peak = amps.iter().fold(0.0f64, |a, &b| a.max(b));
        acc += k.lambdas[r] * peak;
    }
    Ok(((h * w) as f64).sqrt() * acc)
}

/// Higher-order form with additional paired channel-matrix modes; the bound
/// is the same spectral-amplitude sum as the third-order conv case.
pub fn opnorm_bound_higher_conv(
    k: &CpKernel,
    spatial_mode: usize,
    h: usize,
    w: usize,
) -> Result<f64> {
    opnorm_bound_conv(k, spatial_mode, h, w)
}
