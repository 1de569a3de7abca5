//! Dense row-major tensors and the convolution kernels used by the graph.
//!
//! Feature maps are laid out `[batch, channels, height, width]`; convolution
//! weights `[out, in, k, k]`; transposed-convolution weights `[in, out, k, k]`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    /// Dimension `i`, or 1 past the rank.
    pub fn dim(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, start+len)` of a `[B, C, ...]` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor {
        let b = self.dim(0);
        let c = self.dim(1);
        let inner: usize = self.shape[2..].iter().product();
        assert!(start + len <= c, "channel slice out of range");
        let mut out = Vec::with_capacity(b * len * inner);
        for bi in 0..b {
            let base = (bi * c + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Tensor { shape, data: out }
    }

    /// Concatenate `[B, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let b = parts[0].dim(0);
        let inner: usize = parts[0].shape[2..].iter().product();
        let total_c: usize = parts.iter().map(|p| p.dim(1)).sum();
        let mut out = Vec::with_capacity(b * total_c * inner);
        for bi in 0..b {
            for p in parts {
                let c = p.dim(1);
                let base = bi * c * inner;
                out.extend_from_slice(&p.data[base..base + c * inner]);
            }
        }
        let mut shape = parts[0].shape.clone();
        shape[1] = total_c;
        Tensor { shape, data: out }
    }

    /// Sample `i` of a batched tensor, keeping a leading batch axis of 1.
    pub fn batch_item(&self, i: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stack equally shaped `[1, ...]` or unbatched tensors into a batch.
    pub fn stack_batch(items: &[Tensor]) -> Tensor {
        let per = items[0].len();
        let mut shape = vec![items.len()];
        let tail = if items[0].shape.len() > 1 && items[0].shape[0] == 1 {
            &items[0].shape[1..]
        } else {
            &items[0].shape[..]
        };
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(per * items.len());
        for it in items {
            assert_eq!(it.len(), per, "stack_batch: ragged items");
            data.extend_from_slice(&it.data);
        }
        Tensor { shape, data }
    }
}

/// `C = A·B + beta·C` with optional transposition of the stored operands.
///
/// `A` is logically `m×k`, `B` is `k×n`, `C` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stored layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Size-preserving stride-1 convolution.
    pub fn same(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2)
    }

    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn deconv_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Unfold `[b, c, h, w]` into a `(c·k·k) × (b·ho·wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let k = g.kernel;
    let n = b * ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = &mut dst_row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        if g.stride == 1 {
                            // contiguous run of valid columns
                            let off = kx as isize - g.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + off) as usize;
                                dst[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulate columns back into `[b, c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let k = g.kernel;
    let n = b * ho * wo;
    let mut x = vec![0.0; b * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + off) as usize;
                                for (d, s) in dst_row[s0..s0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                    *d += s;
                                }
                            }
                        } else {
                            for (ox, s) in src.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[b, c, p]` → `[c, b·p]`.
pub(crate) fn batch_to_channel_major(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            out[ci * b * p + bi * p..ci * b * p + (bi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[c, b·p]` → `[b, c, p]`.
pub(crate) fn channel_major_to_batch(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * p..(bi * c + ci + 1) * p]
                .copy_from_slice(&x[ci * b * p + bi * p..ci * b * p + (bi + 1) * p]);
        }
    }
    out
}
