//! Dense tensors and the handful of layer kernels the network zoo needs.
//!
//! Everything is `f64`, row-major, and backpropagated by explicit per-layer
//! backward functions. The `*_into` slice kernels are the hot path used by
//! [`crate::spiking`] and [`crate::model`]; the [`Tensor`] wrappers check
//! shapes and are the public surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected 2-D tensor, got {s:?}"))),
        }
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(Error::dim(format!("{what}: expected 3-D tensor, got {s:?}"))),
        }
    }
}

/// Gradient of a loss with respect to a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub params: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamGrad {
    pub fn new(params: Vec<f64>, grads: Vec<f64>) -> Result<Self> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} params vs {} gradient entries",
                params.len(),
                grads.len()
            )));
        }
        Ok(Self { params, grads })
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.grads)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `[M×K] × [K×N] → [M×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Output length of a valid (unpadded) convolution, or `None` when the kernel
/// does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_len: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        in_len: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let out_len = conv_out_len(in_len, kernel, stride).ok_or_else(|| {
            Error::dim(format!(
                "kernel {kernel} (stride {stride}) does not fit input length {in_len}"
            ))
        })?;
        Ok(Self {
            in_channels,
            in_len,
            out_channels,
            kernel,
            stride,
            out_len,
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel
    }
}

/// `out[o,p] = Σ_c Σ_k w[o,c,k]·x[c, p·stride + k]`. `out` is overwritten.
pub fn conv1d_forward_into(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    debug_assert_eq!(input.len(), g.in_channels * g.in_len);
    debug_assert_eq!(kernel.len(), g.kernel_len());
    debug_assert_eq!(out.len(), g.out_channels * g.out_len);
    out.fill(0.0);
    for o in 0..g.out_channels {
        let orow = &mut out[o * g.out_len..(o + 1) * g.out_len];
        for c in 0..g.in_channels {
            let xrow = &input[c * g.in_len..(c + 1) * g.in_len];
            let wrow = &kernel[(o * g.in_channels + c) * g.kernel..][..g.kernel];
            for (k, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (p, y) in orow.iter_mut().enumerate() {
                    *y += w * xrow[p * g.stride + k];
                }
            }
        }
    }
}

/// Accumulates the gradients of [`conv1d_forward_into`] into `grad_kernel`
/// and, when given, `grad_input`.
pub fn conv1d_backward_accum(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
) {
    for o in 0..g.out_channels {
        let grow = &upstream[o * g.out_len..(o + 1) * g.out_len];
        if grow.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..g.in_channels {
            let xrow = &input[c * g.in_len..(c + 1) * g.in_len];
            let gw = &mut grad_kernel[(o * g.in_channels + c) * g.kernel..][..g.kernel];
            for (k, gwk) in gw.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (p, &gy) in grow.iter().enumerate() {
                    acc += gy * xrow[p * g.stride + k];
                }
                *gwk += acc;
            }
        }
    }
    if let Some(gx) = grad_input {
        for o in 0..g.out_channels {
            let grow = &upstream[o * g.out_len..(o + 1) * g.out_len];
            for c in 0..g.in_channels {
                let wrow = &kernel[(o * g.in_channels + c) * g.kernel..][..g.kernel];
                let gxrow = &mut gx[c * g.in_len..(c + 1) * g.in_len];
                for (k, &w) in wrow.iter().enumerate() {
                    for (p, &gy) in grow.iter().enumerate() {
                        gxrow[p * g.stride + k] += w * gy;
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation of `input [C_in×L]` with `kernel [C_out×C_in×K]`.
pub fn conv1d_forward(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geom_for(input, kernel, stride)?;
    let mut out = vec![0.0; g.out_channels * g.out_len];
    conv1d_forward_into(&g, &input.data, &kernel.data, &mut out);
    Tensor::new(vec![g.out_channels, g.out_len], out)
}

/// Returns `(grad_input, grad_kernel)` for [`conv1d_forward`].
pub fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom_for(input, kernel, stride)?;
    if upstream.shape != [g.out_channels, g.out_len] {
        return Err(Error::dim(format!(
            "conv upstream {:?}, expected [{}, {}]",
            upstream.shape, g.out_channels, g.out_len
        )));
    }
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; kernel.len()];
    conv1d_backward_accum(&g, &input.data, &kernel.data, &upstream.data, Some(&mut gx), &mut gw);
    Ok((
        Tensor::new(input.shape.clone(), gx)?,
        Tensor::new(kernel.shape.clone(), gw)?,
    ))
}

fn conv_geom_for(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeom> {
    let (c_in, len) = input.dims2("conv input")?;
    let (c_out, kc_in, k) = kernel.dims3("conv kernel")?;
    if kc_in != c_in {
        return Err(Error::dim(format!(
            "kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    ConvGeom::new(c_in, len, c_out, k, stride)
}

/// `out = W·x + b` with `W [n_out×n_in]`. Zero inputs are skipped, which makes
/// spike-driven layers cost proportional to their activity.
pub fn dense_forward_into(input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    debug_assert_eq!(weights.len(), n_in * out.len());
    let active: Vec<usize> = (0..n_in).filter(|&i| input[i] != 0.0).collect();
    for (o, y) in out.iter_mut().enumerate() {
        let wrow = &weights[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for &i in &active {
            acc += wrow[i] * input[i];
        }
        *y = acc;
    }
}

/// Accumulates gradients of [`dense_forward_into`].
pub fn dense_backward_accum(
    input: &[f64],
    weights: &[f64],
    upstream: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) {
    let n_in = input.len();
    let active: Vec<usize> = (0..n_in).filter(|&i| input[i] != 0.0).collect();
    for (o, &gy) in upstream.iter().enumerate() {
        grad_bias[o] += gy;
        if gy == 0.0 {
            continue;
        }
        let gw = &mut grad_weights[o * n_in..(o + 1) * n_in];
        for &i in &active {
            gw[i] += gy * input[i];
        }
    }
    if let Some(gx) = grad_input {
        for (o, &gy) in upstream.iter().enumerate() {
            if gy == 0.0 {
                continue;
            }
            let wrow = &weights[o * n_in..(o + 1) * n_in];
            for (g, &w) in gx.iter_mut().zip(wrow) {
                *g += w * gy;
            }
        }
    }
}

pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = weights.dims2("dense weights")?;
    if input.len() != n_in || bias.len() != n_out {
        return Err(Error::dim(format!(
            "dense {n_in}->{n_out} given input {} and bias {}",
            input.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; n_out];
    dense_forward_into(&input.data, &weights.data, &bias.data, &mut out);
    Ok(Tensor::vector(out))
}

/// Returns `(grad_input, grad_weights, grad_bias)` for [`dense_forward`].
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n_out, n_in) = weights.dims2("dense weights")?;
    if input.len() != n_in || upstream.len() != n_out {
        return Err(Error::dim(format!(
            "dense {n_in}->{n_out} given input {} and upstream {}",
            input.len(),
            upstream.len()
        )));
    }
    let mut gx = vec![0.0; n_in];
    let mut gw = vec![0.0; n_in * n_out];
    let mut gb = vec![0.0; n_out];
    dense_backward_accum(&input.data, &weights.data, &upstream.data, Some(&mut gx), &mut gw, &mut gb);
    Ok((
        Tensor::new(input.shape.clone(), gx)?,
        Tensor::new(weights.shape.clone(), gw)?,
        Tensor::vector(gb),
    ))
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax(logits) − onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = (log_z - logits[label]).max(0.0);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
