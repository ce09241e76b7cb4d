//! Dense N-order tensors in row-major (last index fastest) layout, plus the
//! numeric primitives everything else is built on: outer/Kronecker products,
//! Frobenius norms, reshaping/matricization, a power-iteration operator-norm
//! oracle, and small symmetric/Hermitian spectral helpers.

use crate::error::{CoreError, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Real dense tensor. `data.len() == shape.iter().product()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Complex dense tensor with the same layout convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub data: Vec<Complex64>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let expect: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(CoreError::InvalidArgument(format!(
            "zero-sized dimension in shape {shape:?}"
        )));
    }
    if expect != len {
        return Err(CoreError::ShapeMismatch(format!(
            "shape {shape:?} implies {expect} entries, got {len}"
        )));
    }
    Ok(())
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(DenseTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<DenseTensor> {
        check_shape(new_shape, self.data.len())?;
        Ok(DenseTensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Groups `row_dims` as matrix rows and `col_dims` as columns. Together
    /// they must be a permutation of all axes.
    pub fn matricize(&self, row_dims: &[usize], col_dims: &[usize]) -> Result<DenseTensor> {
        let n = self.shape.len();
        let mut seen = vec![false; n];
        for &d in row_dims.iter().chain(col_dims) {
            if d >= n || seen[d] {
                return Err(CoreError::InvalidArgument(format!(
                    "axis {d} repeated or out of range for order-{n} tensor"
                )));
            }
            seen[d] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(CoreError::InvalidArgument(
                "matricize must cover every axis".into(),
            ));
        }
        let rows: usize = row_dims.iter().map(|&d| self.shape[d]).product();
        let cols: usize = col_dims.iter().map(|&d| self.shape[d]).product();
        let mut out = vec![0.0; rows * cols];
        let perm: Vec<usize> = row_dims.iter().chain(col_dims).copied().collect();
        let mut idx = vec![0usize; n];
        for (off, &v) in self.data.iter().enumerate() {
            // decode row-major multi-index
            let mut rem = off;
            for ax in (0..n).rev() {
                idx[ax] = rem % self.shape[ax];
                rem /= self.shape[ax];
            }
            let mut pos = 0usize;
            for &ax in &perm {
                pos = pos * self.shape[ax] + idx[ax];
            }
            out[pos] = v;
        }
        DenseTensor::from_vec(&[rows, cols], out)
    }

    pub fn scale(&self, a: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| x + y)
                .collect(),
        })
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_real(t: &DenseTensor) -> Self {
        ComplexTensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        }
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> Complex64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: Complex64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Real part, erroring if any imaginary residue exceeds `tol`.
    pub fn into_real(self, tol: f64) -> Result<DenseTensor> {
        let worst = self
            .data
            .iter()
            .map(|z| z.im.abs())
            .fold(0.0f64, f64::max);
        if worst > tol {
            return Err(CoreError::NonFinite(format!(
                "imaginary residue {worst} exceeds {tol}"
            )));
        }
        Ok(DenseTensor {
            shape: self.shape,
            data: self.data.into_iter().map(|z| z.re).collect(),
        })
    }
}

/// Tensor (outer) product of one or more vectors: entry (i1..iN) = prod v_j[i_j].
pub fn outer_product(vectors: &[&[f64]]) -> Result<DenseTensor> {
    if vectors.is_empty() {
        return Err(CoreError::InvalidArgument("no vectors given".into()));
    }
    if vectors.iter().any(|v| v.is_empty()) {
        return Err(CoreError::InvalidArgument("empty vector".into()));
    }
    let shape: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
    let mut data = vec![1.0f64];
    for v in vectors {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &x in &data {
            for &y in *v {
                next.push(x * y);
            }
        }
        data = next;
    }
    DenseTensor::from_vec(&shape, data)
}

/// Kronecker product of two matrices, block layout (A ⊗ B)[i*p+k, j*q+l] = A[i,j]·B[k,l].
pub fn kronecker(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(CoreError::InvalidArgument(
            "kronecker expects two matrices".into(),
        ));
    }
    let (n, m) = (a.shape[0], a.shape[1]);
    let (p, q) = (b.shape[0], b.shape[1]);
    let mut out = DenseTensor::zeros(&[n * p, m * q]);
    for i in 0..n {
        for j in 0..m {
            let aij = a.get(&[i, j]);
            for k in 0..p {
                for l in 0..q {
                    out.set(&[i * p + k, j * q + l], aij * b.get(&[k, l]));
                }
            }
        }
    }
    Ok(out)
}

/// Leading singular value of an arbitrary linear map, by power iteration on
/// the map composed with its adjoint. The map is materialized column by
/// column (desk scale), so the adjoint is available exactly.
pub fn operator_norm_oracle<F>(
    apply: F,
    in_shape: &[usize],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&DenseTensor) -> DenseTensor,
{
    if tol <= 0.0 {
        return Err(CoreError::InvalidArgument("tol must be positive".into()));
    }
    let n: usize = in_shape.iter().product();
    // Materialize the matrix of the map: columns are images of basis tensors.
    let mut basis = DenseTensor::zeros(in_shape);
    basis.data[0] = 1.0;
    let first = apply(&basis);
    basis.data[0] = 0.0;
    let m = first.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    cols.push(first.data);
    for j in 1..n {
        basis.data[j] = 1.0;
        let img = apply(&basis);
        basis.data[j] = 0.0;
        if img.len() != m {
            return Err(CoreError::ShapeMismatch(
                "map output size varies across basis inputs".into(),
            ));
        }
        cols.push(img.data);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }

    let mut sigma = 0.0f64;
    for it in 0..max_iter {
        // w = A v
        let mut w = vec![0.0f64; m];
        for (j, col) in cols.iter().enumerate() {
            let vj = v[j];
            if vj != 0.0 {
                for (wi, &c) in w.iter_mut().zip(col) {
                    *wi += c * vj;
                }
            }
        }
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Ok(0.0);
        }
        // v = Aᵀ w / ‖Aᵀ w‖
        let mut u = vec![0.0f64; n];
        for (j, col) in cols.iter().enumerate() {
            u[j] = col.iter().zip(&w).map(|(c, x)| c * x).sum::<f64>();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return Ok(wn);
        }
        u.iter_mut().for_each(|x| *x /= un);
        // With v unit-norm, ‖Av‖ converges to the leading singular value.
        if it > 0 && (wn - sigma).abs() <= tol * wn.max(f64::MIN_POSITIVE) {
            return Ok(wn);
        }
        sigma = wn;
        v = u;
    }
    Err(CoreError::NoConvergence {
        max_iter,
        last: sigma,
    })
}

/// Largest eigenvalue of a symmetric matrix via cyclic Jacobi rotations.
/// Exact (to round-off) at the small orders used here.
pub fn sym_eig_max(mat: &[f64], n: usize) -> f64 {
    let mut a = mat.to_vec();
    debug_assert_eq!(a.len(), n * n);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(f64::NEG_INFINITY, f64::max)
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Full eigendecomposition of a symmetric n×n matrix by cyclic Jacobi with
/// accumulated rotations. Returns (eigenvalues, eigenvectors) with columns of
/// the row-major eigenvector matrix matching the eigenvalue order, sorted
/// descending.
pub fn sym_eig(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(mat.len(), n * n);
    let mut a = mat.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0f64; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new_col] = v[k * n + old_col];
        }
    }
    (vals, vecs)
}

/// Spectral norm of a real rows×cols matrix (row-major) via Jacobi on AᵀA.
pub fn matrix_spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(a.len(), rows * cols);
    // Work on the smaller Gram matrix.
    if rows < cols {
        let mut g = vec![0.0f64; rows * rows];
        for i in 0..rows {
            for j in i..rows {
                let mut s = 0.0;
                for k in 0..cols {
                    s += a[i * cols + k] * a[j * cols + k];
                }
                g[i * rows + j] = s;
                g[j * rows + i] = s;
            }
        }
        sym_eig_max(&g, rows).max(0.0).sqrt()
    } else {
        let mut g = vec![0.0f64; cols * cols];
        for i in 0..cols {
            for j in i..cols {
                let mut s = 0.0;
                for k in 0..rows {
                    s += a[k * cols + i] * a[k * cols + j];
                }
                g[i * cols + j] = s;
                g[j * cols + i] = s;
            }
        }
        sym_eig_max(&g, cols).max(0.0).sqrt()
    }
}

/// Spectral norm of a complex rows×cols matrix. The Hermitian Gram matrix
/// AᴴA is embedded as the real symmetric block matrix [[Re,−Im],[Im,Re]],
/// whose spectrum duplicates the Gram spectrum.
pub fn complex_matrix_spectral_norm(a: &[Complex64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(a.len(), rows * cols);
    let n = cols;
    let mut g = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..rows {
                s += a[k * cols + i].conj() * a[k * cols + j];
            }
            g[i * n + j] = s;
        }
    }
    let m = 2 * n;
    let mut e = vec![0.0f64; m * m];
    for i in 0..n {
        for j in 0..n {
            let z = g[i * n + j];
            e[i * m + j] = z.re;
            e[(i + n) * m + (j + n)] = z.re;
            e[i * m + (j + n)] = -z.im;
            e[(i + n) * m + j] = z.im;
        }
    }
    sym_eig_max(&e, m).max(0.0).sqrt()
}
