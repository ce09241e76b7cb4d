//! Feed-forward ReLU networks over dense or CP conv/FC layers with optional
//! skip wrappers: forward with activation tracing, analytic cross-entropy
//! gradients for every parameter, margin loss, and dense↔CP conversion.
//!
//! Layout conventions: conv activations are H×W×C tensors, conv weights are
//! o×s×kx×ky; FC activations are s1×s2 matrices, FC weights s1×s2×s1'×s2'
//! with Y[i',j'] = Σ_{i,j} W[i,j,i',j']·X[i,j]. The final layer has no
//! activation; a conv network's score vector is the global spatial sum of
//! the last pre-activation, an FC network's is the flattened output matrix.

use crate::cp::{self, CpKernel, CpMode};
use crate::error::{CoreError, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    ConvDense {
        s: usize,
        o: usize,
        kx: usize,
        ky: usize,
        /// o×s×kx×ky
        weights: DenseTensor,
    },
    ConvCp {
        s: usize,
        o: usize,
        kx: usize,
        ky: usize,
        /// modes: [o-vector, s-vector, kx×ky spatial matrix]
        kernel: CpKernel,
    },
    FcDense {
        s1: usize,
        s2: usize,
        s1p: usize,
        s2p: usize,
        /// s1×s2×s1'×s2'
        weights: DenseTensor,
    },
    FcCp {
        s1: usize,
        s2: usize,
        s1p: usize,
        s2p: usize,
        /// modes: either four vectors [s1],[s2],[s1'],[s2'] or two matrices
        /// [s1,s2],[s1',s2']
        kernel: CpKernel,
    },
    Skip {
        inner: Box<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        match self {
            LayerSpec::ConvDense { .. } | LayerSpec::ConvCp { .. } => true,
            LayerSpec::FcDense { .. } | LayerSpec::FcCp { .. } => false,
            LayerSpec::Skip { inner } => inner.is_conv(),
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, LayerSpec::Skip { .. })
    }

    /// Innermost non-skip layer.
    pub fn core(&self) -> &LayerSpec {
        match self {
            LayerSpec::Skip { inner } => inner.core(),
            other => other,
        }
    }

    /// Input shape (without reference to the spatial grid for conv: channel
    /// count only).
    pub fn in_channels(&self) -> usize {
        match self.core() {
            LayerSpec::ConvDense { s, .. } | LayerSpec::ConvCp { s, .. } => *s,
            LayerSpec::FcDense { s1, s2, .. } | LayerSpec::FcCp { s1, s2, .. } => s1 * s2,
            LayerSpec::Skip { .. } => unreachable!(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.core() {
            LayerSpec::ConvDense { o, .. } | LayerSpec::ConvCp { o, .. } => *o,
            LayerSpec::FcDense { s1p, s2p, .. } | LayerSpec::FcCp { s1p, s2p, .. } => s1p * s2p,
            LayerSpec::Skip { .. } => unreachable!(),
        }
    }

    /// Dense weight tensor in the layer's storage layout.
    pub fn dense_weights(&self) -> DenseTensor {
        match self {
            LayerSpec::ConvDense { weights, .. } | LayerSpec::FcDense { weights, .. } => {
                weights.clone()
            }
            LayerSpec::ConvCp { kernel, .. } | LayerSpec::FcCp { kernel, .. } => {
                kernel.reconstruct()
            }
            LayerSpec::Skip { inner } => inner.dense_weights(),
        }
    }

    /// Frobenius norm of the layer's weight kernel.
    pub fn weight_frobenius(&self) -> f64 {
        match self {
            LayerSpec::ConvDense { weights, .. } | LayerSpec::FcDense { weights, .. } => {
                weights.frobenius_norm()
            }
            LayerSpec::ConvCp { kernel, .. } | LayerSpec::FcCp { kernel, .. } => {
                kernel.frobenius_norm()
            }
            LayerSpec::Skip { inner } => inner.weight_frobenius(),
        }
    }

    pub fn cp_kernel(&self) -> Option<&CpKernel> {
        match self {
            LayerSpec::ConvCp { kernel, .. } | LayerSpec::FcCp { kernel, .. } => Some(kernel),
            LayerSpec::Skip { inner } => inner.cp_kernel(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<LayerSpec>,
    /// [H, W, C] for conv networks, [d] for FC networks.
    pub input_shape: Vec<usize>,
}

impl NetworkModel {
    /// Validates layer chaining and skip shape preservation.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::InvalidArgument("network has no layers".into()));
        }
        let first = &self.layers[0];
        let in_ch = match (first.is_conv(), self.input_shape.len()) {
            (true, 3) => self.input_shape[2],
            (false, 1) => self.input_shape[0],
            _ => {
                return Err(CoreError::ShapeMismatch(format!(
                    "input shape {:?} does not match first layer kind",
                    self.input_shape
                )))
            }
        };
        let mut ch = in_ch;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels() != ch {
                return Err(CoreError::Layer {
                    layer: i,
                    msg: format!(
                        "expects {} input channels/width, got {}",
                        layer.in_channels(),
                        ch
                    ),
                });
            }
            if layer.is_skip() && layer.in_channels() != layer.out_channels() {
                return Err(CoreError::Layer {
                    layer: i,
                    msg: "skip layer must preserve shape".into(),
                });
            }
            if let LayerSpec::ConvDense { kx, ky, .. } | LayerSpec::ConvCp { kx, ky, .. } =
                layer.core()
            {
                if self.input_shape.len() == 3
                    && (*kx > self.input_shape[0] || *ky > self.input_shape[1])
                {
                    return Err(CoreError::Layer {
                        layer: i,
                        msg: "kernel larger than spatial grid".into(),
                    });
                }
            }
            ch = layer.out_channels();
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Spatial grid (H, W) for conv networks; (1, 1) for FC.
    pub fn grid(&self) -> (usize, usize) {
        if self.input_shape.len() == 3 {
            (self.input_shape[0], self.input_shape[1])
        } else {
            (1, 1)
        }
    }
}

/// Per-layer activations captured during a forward pass. `inputs[k]` is
/// X^(k) (post-activation input of layer k, with X^(0) the network input);
/// `preacts[k]` is Y^(k). `final_output` aliases the last pre-activation.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub inputs: Vec<DenseTensor>,
    pub preacts: Vec<DenseTensor>,
    pub scores: Vec<f64>,
}

impl ActivationTrace {
    pub fn final_output(&self) -> &DenseTensor {
        self.preacts.last().expect("non-empty trace")
    }

    pub fn input_norm(&self, k: usize) -> f64 {
        self.inputs[k].frobenius_norm()
    }

    pub fn preact_norm(&self, k: usize) -> f64 {
        self.preacts[k].frobenius_norm()
    }
}

fn relu(t: &DenseTensor) -> DenseTensor {
    DenseTensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| x.max(0.0)).collect(),
    }
}

/// Single-channel circular convolution of an H×W plane with a kx×ky filter
/// anchored at (0,0).
fn conv_plane(x: &[f64], h: usize, w: usize, c: &[f64], kx: usize, ky: usize) -> Vec<f64> {
    let mut y = vec![0.0f64; h * w];
    for p in 0..h {
        for q in 0..w {
            let xv = x[p * w + q];
            if xv == 0.0 {
                continue;
            }
            for dx in 0..kx {
                let i = (p + dx) % h;
                let row = i * w;
                for dy in 0..ky {
                    let j = (q + dy) % w;
                    y[row + j] += c[dx * ky + dy] * xv;
                }
            }
        }
    }
    y
}

/// Adjoint of `conv_plane` in its input: correlation of dy with the filter.
fn conv_plane_adjoint(dy: &[f64], h: usize, w: usize, c: &[f64], kx: usize, ky: usize) -> Vec<f64> {
    let mut dx_out = vec![0.0f64; h * w];
    for p in 0..h {
        for q in 0..w {
            let mut acc = 0.0;
            for dx in 0..kx {
                let i = (p + dx) % h;
                let row = i * w;
                for dy_ in 0..ky {
                    let j = (q + dy_) % w;
                    acc += c[dx * ky + dy_] * dy[row + j];
                }
            }
            dx_out[p * w + q] = acc;
        }
    }
    dx_out
}

fn layer_forward(layer: &LayerSpec, x: &DenseTensor) -> Result<DenseTensor> {
    match layer {
        LayerSpec::ConvDense {
            s,
            o,
            kx,
            ky,
            weights,
        } => {
            let (h, w) = (x.shape[0], x.shape[1]);
            let mut y = DenseTensor::zeros(&[h, w, *o]);
            for p in 0..h {
                for q in 0..w {
                    let xbase = (p * w + q) * s;
                    for dx in 0..*kx {
                        let i = (p + dx) % h;
                        for dy in 0..*ky {
                            let j = (q + dy) % w;
                            let ybase = (i * w + j) * o;
                            for t in 0..*o {
                                let mut acc = 0.0;
                                for ss in 0..*s {
                                    acc += weights.get(&[t, ss, dx, dy]) * x.data[xbase + ss];
                                }
                                y.data[ybase + t] += acc;
                            }
                        }
                    }
                }
            }
            Ok(y)
        }
        LayerSpec::ConvCp {
            s,
            o,
            kx,
            ky,
            kernel,
        } => {
            let (h, w) = (x.shape[0], x.shape[1]);
            let mut y = DenseTensor::zeros(&[h, w, *o]);
            let (bm, am, cm) = conv_cp_modes(kernel)?;
            for r in 0..kernel.width() {
                let lam = kernel.lambdas[r];
                if lam == 0.0 {
                    continue;
                }
                let a = &am.factors[r];
                let b = &bm.factors[r];
                let c = &cm.factors[r];
                // channel contraction, spatial filter, channel expansion
                let mut xa = vec![0.0f64; h * w];
                for pq in 0..h * w {
                    let base = pq * s;
                    let mut acc = 0.0;
                    for ss in 0..*s {
                        acc += a[ss] * x.data[base + ss];
                    }
                    xa[pq] = acc;
                }
                let cxa = conv_plane(&xa, h, w, c, *kx, *ky);
                for pq in 0..h * w {
                    let v = lam * cxa[pq];
                    if v != 0.0 {
                        let base = pq * o;
                        for t in 0..*o {
                            y.data[base + t] += v * b[t];
                        }
                    }
                }
            }
            Ok(y)
        }
        LayerSpec::FcDense {
            s1,
            s2,
            s1p,
            s2p,
            weights,
        } => {
            let mut y = DenseTensor::zeros(&[*s1p, *s2p]);
            for i in 0..*s1 {
                for j in 0..*s2 {
                    let xv = x.data[i * s2 + j];
                    if xv == 0.0 {
                        continue;
                    }
                    for ip in 0..*s1p {
                        for jp in 0..*s2p {
                            y.data[ip * s2p + jp] += weights.get(&[i, j, ip, jp]) * xv;
                        }
                    }
                }
            }
            Ok(y)
        }
        LayerSpec::FcCp {
            s1p, s2p, kernel, ..
        } => {
            let mut y = DenseTensor::zeros(&[*s1p, *s2p]);
            for r in 0..kernel.width() {
                let lam = kernel.lambdas[r];
                if lam == 0.0 {
                    continue;
                }
                let (u, v) = fc_component(kernel, r)?;
                let inner: f64 = u.iter().zip(&x.data).map(|(a, b)| a * b).sum();
                let scale = lam * inner;
                for (yo, &vv) in y.data.iter_mut().zip(v.iter()) {
                    *yo += scale * vv;
                }
            }
            Ok(y)
        }
        LayerSpec::Skip { inner } => {
            let y = layer_forward(inner, x)?;
            y.add(x)
        }
    }
}

/// Conv CP kernels carry modes [o-vector, s-vector, spatial matrix].
pub fn conv_cp_modes(kernel: &CpKernel) -> Result<(&CpMode, &CpMode, &CpMode)> {
    if kernel.modes.len() != 3
        || kernel.modes[0].dims.len() != 1
        || kernel.modes[1].dims.len() != 1
        || kernel.modes[2].dims.len() != 2
    {
        return Err(CoreError::InvalidArgument(
            "conv CP kernel must have modes [o],[s],[kx,ky]".into(),
        ));
    }
    Ok((&kernel.modes[0], &kernel.modes[1], &kernel.modes[2]))
}

/// FC component r as a pair of flattened s1·s2 and s1'·s2' blocks,
/// supporting both the 4-vector and 2-matrix mode conventions.
fn fc_component(kernel: &CpKernel, r: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    match kernel.modes.len() {
        2 => Ok((
            kernel.modes[0].factors[r].clone(),
            kernel.modes[1].factors[r].clone(),
        )),
        4 => {
            let a = &kernel.modes[0].factors[r];
            let b = &kernel.modes[1].factors[r];
            let c = &kernel.modes[2].factors[r];
            let d = &kernel.modes[3].factors[r];
            let mut u = Vec::with_capacity(a.len() * b.len());
            for &x in a {
                for &y in b {
                    u.push(x * y);
                }
            }
            let mut v = Vec::with_capacity(c.len() * d.len());
            for &x in c {
                for &y in d {
                    v.push(x * y);
                }
            }
            Ok((u, v))
        }
        n => Err(CoreError::InvalidArgument(format!(
            "FC CP kernel must have 2 or 4 modes, has {n}"
        ))),
    }
}

/// Full forward pass with activation tracing.
pub fn forward(model: &NetworkModel, x: &DenseTensor) -> Result<(Vec<f64>, ActivationTrace)> {
    let expected: Vec<usize> = if model.input_shape.len() == 1 {
        // FC input vector reshaped to the first layer's matrix shape
        model.input_shape.clone()
    } else {
        model.input_shape.clone()
    };
    if x.shape != expected {
        return Err(CoreError::ShapeMismatch(format!(
            "input shape {:?}, expected {:?}",
            x.shape, expected
        )));
    }
    let n = model.layers.len();
    let mut inputs: Vec<DenseTensor> = Vec::with_capacity(n);
    let mut preacts: Vec<DenseTensor> = Vec::with_capacity(n);
    let mut cur = if model.input_shape.len() == 1 {
        match model.layers[0].core() {
            LayerSpec::FcDense { s1, s2, .. } | LayerSpec::FcCp { s1, s2, .. } => {
                x.reshape(&[*s1, *s2])?
            }
            _ => x.clone(),
        }
    } else {
        x.clone()
    };
    for (k, layer) in model.layers.iter().enumerate() {
        inputs.push(cur.clone());
        let y = layer_forward(layer, &cur).map_err(|e| CoreError::Layer {
            layer: k,
            msg: e.to_string(),
        })?;
        cur = if k + 1 < n { relu(&y) } else { y.clone() };
        preacts.push(y);
    }
    let last = preacts.last().expect("n ≥ 1");
    let scores = readout(model, last);
    Ok((
        scores.clone(),
        ActivationTrace {
            inputs,
            preacts,
            scores,
        },
    ))
}

/// Fixed linear readout: global spatial sum for conv outputs, flatten for FC.
fn readout(model: &NetworkModel, last: &DenseTensor) -> Vec<f64> {
    if model.layers.last().expect("n ≥ 1").is_conv() {
        let (h, w, o) = (last.shape[0], last.shape[1], last.shape[2]);
        let mut s = vec![0.0f64; o];
        for pq in 0..h * w {
            for t in 0..o {
                s[t] += last.data[pq * o + t];
            }
        }
        s
    } else {
        last.data.clone()
    }
}

/// Gradient container mirroring a layer's parameter structure.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Dense(DenseTensor),
    Cp {
        lambdas: Vec<f64>,
        /// factors[mode][r] matching the kernel's layout
        factors: Vec<Vec<Vec<f64>>>,
    },
    Skip(Box<LayerGrad>),
}

impl LayerGrad {
    pub fn zeros_like(layer: &LayerSpec) -> LayerGrad {
        match layer {
            LayerSpec::ConvDense { weights, .. } | LayerSpec::FcDense { weights, .. } => {
                LayerGrad::Dense(DenseTensor::zeros(&weights.shape))
            }
            LayerSpec::ConvCp { kernel, .. } | LayerSpec::FcCp { kernel, .. } => LayerGrad::Cp {
                lambdas: vec![0.0; kernel.width()],
                factors: kernel
                    .modes
                    .iter()
                    .map(|m| m.factors.iter().map(|f| vec![0.0; f.len()]).collect())
                    .collect(),
            },
            LayerSpec::Skip { inner } => LayerGrad::Skip(Box::new(LayerGrad::zeros_like(inner))),
        }
    }

    pub fn accumulate(&mut self, other: &LayerGrad) {
        match (self, other) {
            (LayerGrad::Dense(a), LayerGrad::Dense(b)) => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            (
                LayerGrad::Cp {
                    lambdas: la,
                    factors: fa,
                },
                LayerGrad::Cp {
                    lambdas: lb,
                    factors: fb,
                },
            ) => {
                for (x, y) in la.iter_mut().zip(lb) {
                    *x += y;
                }
                for (ma, mb) in fa.iter_mut().zip(fb) {
                    for (va, vb) in ma.iter_mut().zip(mb) {
                        for (x, y) in va.iter_mut().zip(vb) {
                            *x += y;
                        }
                    }
                }
            }
            (LayerGrad::Skip(a), LayerGrad::Skip(b)) => a.accumulate(b),
            _ => panic!("gradient structure mismatch"),
        }
    }

    pub fn scale(&mut self, f: f64) {
        match self {
            LayerGrad::Dense(a) => a.data.iter_mut().for_each(|x| *x *= f),
            LayerGrad::Cp { lambdas, factors } => {
                lambdas.iter_mut().for_each(|x| *x *= f);
                for m in factors {
                    for v in m {
                        v.iter_mut().for_each(|x| *x *= f);
                    }
                }
            }
            LayerGrad::Skip(inner) => inner.scale(f),
        }
    }
}

fn layer_backward(
    layer: &LayerSpec,
    x: &DenseTensor,
    dy: &DenseTensor,
) -> Result<(LayerGrad, DenseTensor)> {
    match layer {
        LayerSpec::ConvDense {
            s,
            o,
            kx,
            ky,
            weights,
        } => {
            let (h, w) = (x.shape[0], x.shape[1]);
            let mut gw = DenseTensor::zeros(&weights.shape);
            let mut dx = DenseTensor::zeros(&x.shape);
            for p in 0..h {
                for q in 0..w {
                    let xbase = (p * w + q) * s;
                    for ddx in 0..*kx {
                        let i = (p + ddx) % h;
                        for ddy in 0..*ky {
                            let j = (q + ddy) % w;
                            let ybase = (i * w + j) * o;
                            for t in 0..*o {
                                let g = dy.data[ybase + t];
                                if g == 0.0 {
                                    continue;
                                }
                                for ss in 0..*s {
                                    let widx = ((t * s + ss) * kx + ddx) * ky + ddy;
                                    gw.data[widx] += g * x.data[xbase + ss];
                                    dx.data[xbase + ss] += g * weights.data[widx];
                                }
                            }
                        }
                    }
                }
            }
            Ok((LayerGrad::Dense(gw), dx))
        }
        LayerSpec::ConvCp {
            s,
            o,
            kx,
            ky,
            kernel,
        } => {
            let (h, w) = (x.shape[0], x.shape[1]);
            let (bm, am, cm) = conv_cp_modes(kernel)?;
            let r_w = kernel.width();
            let mut glam = vec![0.0f64; r_w];
            let mut gb = vec![vec![0.0f64; *o]; r_w];
            let mut ga = vec![vec![0.0f64; *s]; r_w];
            let mut gc = vec![vec![0.0f64; kx * ky]; r_w];
            let mut dx = DenseTensor::zeros(&x.shape);
            for r in 0..r_w {
                let lam = kernel.lambdas[r];
                let a = &am.factors[r];
                let b = &bm.factors[r];
                let c = &cm.factors[r];
                let mut xa = vec![0.0f64; h * w];
                for pq in 0..h * w {
                    let base = pq * s;
                    let mut acc = 0.0;
                    for ss in 0..*s {
                        acc += a[ss] * x.data[base + ss];
                    }
                    xa[pq] = acc;
                }
                let cxa = conv_plane(&xa, h, w, c, *kx, *ky);
                let mut dyb = vec![0.0f64; h * w];
                for pq in 0..h * w {
                    let base = pq * o;
                    let mut acc = 0.0;
                    for t in 0..*o {
                        acc += b[t] * dy.data[base + t];
                    }
                    dyb[pq] = acc;
                }
                glam[r] = dyb.iter().zip(&cxa).map(|(u, v)| u * v).sum();
                for t in 0..*o {
                    let mut acc = 0.0;
                    for pq in 0..h * w {
                        acc += dy.data[pq * o + t] * cxa[pq];
                    }
                    gb[r][t] = lam * acc;
                }
                // Y[(p+dx)%H,(q+dy)%W] += λ C[dx,dy] xa[p,q]
                for ddx in 0..*kx {
                    for ddy in 0..*ky {
                        let mut acc = 0.0;
                        for p in 0..h {
                            let i = (p + ddx) % h;
                            for q in 0..w {
                                let j = (q + ddy) % w;
                                acc += dyb[i * w + j] * xa[p * w + q];
                            }
                        }
                        gc[r][ddx * ky + ddy] = lam * acc;
                    }
                }
                let dxa = conv_plane_adjoint(&dyb, h, w, c, *kx, *ky);
                for ss in 0..*s {
                    let mut acc = 0.0;
                    for pq in 0..h * w {
                        acc += dxa[pq] * x.data[pq * s + ss];
                    }
                    ga[r][ss] = lam * acc;
                }
                for pq in 0..h * w {
                    let v = lam * dxa[pq];
                    if v != 0.0 {
                        let base = pq * s;
                        for ss in 0..*s {
                            dx.data[base + ss] += v * a[ss];
                        }
                    }
                }
            }
            Ok((
                LayerGrad::Cp {
                    lambdas: glam,
                    factors: vec![gb, ga, gc],
                },
                dx,
            ))
        }
        LayerSpec::FcDense {
            s1,
            s2,
            s1p,
            s2p,
            weights,
        } => {
            let mut gw = DenseTensor::zeros(&weights.shape);
            let mut dx = DenseTensor::zeros(&x.shape);
            for i in 0..*s1 {
                for j in 0..*s2 {
                    let xv = x.data[i * s2 + j];
                    let mut acc = 0.0;
                    for ip in 0..*s1p {
                        for jp in 0..*s2p {
                            let widx = ((i * s2 + j) * s1p + ip) * s2p + jp;
                            let g = dy.data[ip * s2p + jp];
                            gw.data[widx] += g * xv;
                            acc += g * weights.data[widx];
                        }
                    }
                    dx.data[i * s2 + j] = acc;
                }
            }
            Ok((LayerGrad::Dense(gw), dx))
        }
        LayerSpec::FcCp { kernel, .. } => {
            let r_w = kernel.width();
            let mut glam = vec![0.0f64; r_w];
            let mut gf: Vec<Vec<Vec<f64>>> = kernel
                .modes
                .iter()
                .map(|m| m.factors.iter().map(|f| vec![0.0; f.len()]).collect())
                .collect();
            let mut dx = DenseTensor::zeros(&x.shape);
            for r in 0..r_w {
                let lam = kernel.lambdas[r];
                match kernel.modes.len() {
                    2 => {
                        let u = &kernel.modes[0].factors[r];
                        let v = &kernel.modes[1].factors[r];
                        let uin: f64 = u.iter().zip(&x.data).map(|(a, b)| a * b).sum();
                        let wout: f64 = v.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
                        glam[r] = uin * wout;
                        for (g, &xv) in gf[0][r].iter_mut().zip(&x.data) {
                            *g = lam * wout * xv;
                        }
                        for (g, &dv) in gf[1][r].iter_mut().zip(&dy.data) {
                            *g = lam * uin * dv;
                        }
                        for (d, &uv) in dx.data.iter_mut().zip(u.iter()) {
                            *d += lam * wout * uv;
                        }
                    }
                    4 => {
                        let a = &kernel.modes[0].factors[r];
                        let b = &kernel.modes[1].factors[r];
                        let c = &kernel.modes[2].factors[r];
                        let d = &kernel.modes[3].factors[r];
                        let (n1, n2) = (a.len(), b.len());
                        let (m1, m2) = (c.len(), d.len());
                        // u = aᵀXb, w = cᵀ(dY)d
                        let mut xb = vec![0.0f64; n1];
                        for i in 0..n1 {
                            let mut acc = 0.0;
                            for j in 0..n2 {
                                acc += x.data[i * n2 + j] * b[j];
                            }
                            xb[i] = acc;
                        }
                        let u: f64 = a.iter().zip(&xb).map(|(p, q)| p * q).sum();
                        let mut dyd = vec![0.0f64; m1];
                        for i in 0..m1 {
                            let mut acc = 0.0;
                            for j in 0..m2 {
                                acc += dy.data[i * m2 + j] * d[j];
                            }
                            dyd[i] = acc;
                        }
                        let wv: f64 = c.iter().zip(&dyd).map(|(p, q)| p * q).sum();
                        glam[r] = u * wv;
                        for i in 0..n1 {
                            gf[0][r][i] = lam * wv * xb[i];
                        }
                        for j in 0..n2 {
                            let mut acc = 0.0;
                            for i in 0..n1 {
                                acc += a[i] * x.data[i * n2 + j];
                            }
                            gf[1][r][j] = lam * wv * acc;
                        }
                        for i in 0..m1 {
                            gf[2][r][i] = lam * u * dyd[i];
                        }
                        for j in 0..m2 {
                            let mut acc = 0.0;
                            for i in 0..m1 {
                                acc += c[i] * dy.data[i * m2 + j];
                            }
                            gf[3][r][j] = lam * u * acc;
                        }
                        for i in 0..n1 {
                            for j in 0..n2 {
                                dx.data[i * n2 + j] += lam * wv * a[i] * b[j];
                            }
                        }
                    }
                    n => {
                        return Err(CoreError::InvalidArgument(format!(
                            "FC CP kernel must have 2 or 4 modes, has {n}"
                        )))
                    }
                }
            }
            Ok((
                LayerGrad::Cp {
                    lambdas: glam,
                    factors: gf,
                },
                dx,
            ))
        }
        LayerSpec::Skip { inner } => {
            let (g, dx_inner) = layer_backward(inner, x, dy)?;
            Ok((LayerGrad::Skip(Box::new(g)), dx_inner.add(dy)?))
        }
    }
}

/// Cross-entropy loss, scores, and analytic gradients for a single sample.
pub fn backward(
    model: &NetworkModel,
    x: &DenseTensor,
    target: usize,
) -> Result<(f64, Vec<f64>, Vec<LayerGrad>)> {
    let (scores, trace) = forward(model, x)?;
    if target >= scores.len() {
        return Err(CoreError::InvalidArgument(format!(
            "target {target} out of range for {} classes",
            scores.len()
        )));
    }
    let maxs = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - maxs).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[target] / z).ln();
    let dscore: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == target { 1.0 } else { 0.0 })
        .collect();

    let n = model.layers.len();
    // Upstream gradient of the readout.
    let last = trace.final_output();
    let mut da = if model.layers[n - 1].is_conv() {
        let (h, w, o) = (last.shape[0], last.shape[1], last.shape[2]);
        let mut d = DenseTensor::zeros(&[h, w, o]);
        for pq in 0..h * w {
            for t in 0..o {
                d.data[pq * o + t] = dscore[t];
            }
        }
        d
    } else {
        DenseTensor::from_vec(&last.shape, dscore.clone())?
    };

    let mut grads: Vec<LayerGrad> = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let dy = if k + 1 < n {
            // ReLU mask of the layer's pre-activation
            let mut d = da.clone();
            for (g, &p) in d.data.iter_mut().zip(&trace.preacts[k].data) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            d
        } else {
            da.clone()
        };
        let (g, dx) = layer_backward(&model.layers[k], &trace.inputs[k], &dy)?;
        grads.push(g);
        da = dx;
    }
    grads.reverse();
    Ok((loss, scores, grads))
}

/// Fraction of samples whose true-class score fails to beat every other
/// class by more than γ.
pub fn margin_loss(
    model: &NetworkModel,
    samples: &[(DenseTensor, usize)],
    gamma: f64,
) -> Result<f64> {
    if gamma < 0.0 {
        return Err(CoreError::InvalidArgument("γ must be ≥ 0".into()));
    }
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty dataset".into()));
    }
    let mut violations = 0usize;
    for (x, y) in samples {
        let (scores, _) = forward(model, x)?;
        let own = scores[*y];
        let best_other = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| i != y)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if own <= gamma + best_other {
            violations += 1;
        }
    }
    Ok(violations as f64 / samples.len() as f64)
}

/// Per-sample margin M(x)[y] − max_{i≠y} M(x)[i].
pub fn margins(model: &NetworkModel, samples: &[(DenseTensor, usize)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for (x, y) in samples {
        let (scores, _) = forward(model, x)?;
        let own = scores[*y];
        let best_other = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| i != y)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(own - best_other);
    }
    Ok(out)
}

fn densify_layer(layer: &LayerSpec) -> LayerSpec {
    match layer {
        LayerSpec::ConvCp { s, o, kx, ky, kernel } => LayerSpec::ConvDense {
            s: *s,
            o: *o,
            kx: *kx,
            ky: *ky,
            weights: kernel.reconstruct(),
        },
        LayerSpec::FcCp {
            s1,
            s2,
            s1p,
            s2p,
            kernel,
        } => {
            // CP modes reconstruct in (input, output) axis order for the
            // 2-mode form and (s1,s2,s1',s2') for the 4-mode form; both
            // flatten to the s1×s2×s1'×s2' storage layout.
            let dense = kernel.reconstruct();
            let reshaped = dense
                .reshape(&[*s1, *s2, *s1p, *s2p])
                .expect("CP dims match layer dims");
            LayerSpec::FcDense {
                s1: *s1,
                s2: *s2,
                s1p: *s1p,
                s2p: *s2p,
                weights: reshaped,
            }
        }
        LayerSpec::Skip { inner } => LayerSpec::Skip {
            inner: Box::new(densify_layer(inner)),
        },
        dense => dense.clone(),
    }
}

/// Replaces every CP layer by its reconstructed dense kernel.
pub fn densify(model: &NetworkModel) -> NetworkModel {
    NetworkModel {
        layers: model.layers.iter().map(densify_layer).collect(),
        input_shape: model.input_shape.clone(),
    }
}

fn cp_ify_layer(layer: &LayerSpec, rank: usize, tol: f64, seed: u64) -> Result<LayerSpec> {
    match layer {
        LayerSpec::ConvDense {
            s,
            o,
            kx,
            ky,
            weights,
        } => {
            let (kernel, _err) = cp::cp_als(
                weights,
                rank,
                &[vec![0], vec![1], vec![2, 3]],
                tol,
                500,
                seed,
            )?;
            Ok(LayerSpec::ConvCp {
                s: *s,
                o: *o,
                kx: *kx,
                ky: *ky,
                kernel,
            })
        }
        LayerSpec::FcDense {
            s1,
            s2,
            s1p,
            s2p,
            weights,
        } => {
            let (kernel, _err) =
                cp::cp_als(weights, rank, &[vec![0, 1], vec![2, 3]], tol, 500, seed)?;
            Ok(LayerSpec::FcCp {
                s1: *s1,
                s2: *s2,
                s1p: *s1p,
                s2p: *s2p,
                kernel,
            })
        }
        LayerSpec::Skip { inner } => Ok(LayerSpec::Skip {
            inner: Box::new(cp_ify_layer(inner, rank, tol, seed)?),
        }),
        already_cp => Ok(already_cp.clone()),
    }
}

/// Decomposes every dense layer at the given per-layer ranks. `ranks[k]`
/// must respect the admissible cap for layer k's grouped shape.
pub fn cp_ify(model: &NetworkModel, ranks: &[usize], tol: f64, seed: u64) -> Result<NetworkModel> {
    if ranks.len() != model.layers.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} ranks for {} layers",
            ranks.len(),
            model.layers.len()
        )));
    }
    let layers: Result<Vec<LayerSpec>> = model
        .layers
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(k, (l, &r))| cp_ify_layer(l, r, tol, seed.wrapping_add(k as u64)))
        .collect();
    Ok(NetworkModel {
        layers: layers?,
        input_shape: model.input_shape.clone(),
    })
}
