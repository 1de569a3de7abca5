//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the information its backward pass needs. [`Graph::backward`] walks the
//! tape in reverse and returns a gradient for every node that depends on a
//! variable leaf. Graphs are built fresh for each forward pass.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::tensor::{
    batch_to_channel_major, channel_major_to_batch, col2im, gemm, im2col, ConvGeom, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        x_mat: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    ToRows(Var),
    FromRows(Var),
    NormalizeRows(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SoftmaxRows(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    RowNorms(Var),
    SampleNorms(Var),
    SegmentSum(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a named parameter once per graph; repeated binds reuse the leaf so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != geom.kernel || ws[3] != geom.kernel {
            return shape_err("conv2d", format!("input {xs:?} weight {ws:?} kernel {}", geom.kernel));
        }
        let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let (Some(ho), Some(wo)) = (geom.conv_out(h), geom.conv_out(wd)) else {
            return shape_err("conv2d", format!("input {h}x{wd} smaller than kernel"));
        };
        if let Some(bv) = b {
            if self.value(bv).len() != co {
                return shape_err("conv2d", format!("bias {:?} for {co} outputs", self.value(bv).shape()));
            }
        }
        let kk = c * geom.kernel * geom.kernel;
        let n = bsz * ho * wo;
        let cols = im2col(self.value(x).data(), bsz, c, h, wd, geom, ho, wo);
        let mut ym = vec![0.0; co * n];
        gemm(co, kk, n, self.value(w).data(), false, &cols, false, &mut ym, 0.0);
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            for (o, row) in ym.chunks_mut(n).enumerate() {
                for v in row {
                    *v += bias[o];
                }
            }
        }
        let y = channel_major_to_batch(&ym, bsz, co, ho * wo);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_vec(&[bsz, co, ho, wo], y),
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        ))
    }

    /// Transposed convolution; weight layout `[in, out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != geom.kernel || ws[3] != geom.kernel {
            return shape_err("conv_transpose2d", format!("input {xs:?} weight {ws:?}"));
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let (Some(ho), Some(wo)) = (geom.deconv_out(h), geom.deconv_out(wd)) else {
            return shape_err("conv_transpose2d", "degenerate output size");
        };
        if geom.conv_out(ho) != Some(h) || geom.conv_out(wo) != Some(wd) {
            return shape_err("conv_transpose2d", "geometry is not invertible");
        }
        let kk = co * geom.kernel * geom.kernel;
        let n = bsz * h * wd;
        let x_mat = batch_to_channel_major(self.value(x).data(), bsz, cin, h * wd);
        let mut cols = vec![0.0; kk * n];
        gemm(kk, cin, n, self.value(w).data(), true, &x_mat, false, &mut cols, 0.0);
        let mut y = col2im(&cols, bsz, co, ho, wo, geom, h, wd);
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            for (i, chunk) in y.chunks_mut(ho * wo).enumerate() {
                let o = i % co;
                for v in chunk {
                    *v += bias[o];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        let x_mat = if self.rg(w) { x_mat } else { Vec::new() };
        Ok(self.push(
            Tensor::from_vec(&[bsz, co, ho, wo], y),
            Op::ConvTranspose2d { x, w, b, geom, x_mat },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return shape_err("concat_channels", format!("{first:?} vs {s:?}"));
            }
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).dim(1);
        if start + len > c {
            return shape_err("slice_channels", format!("[{start}, {}) of {c} channels", start + len));
        }
        let v = self.value(x).slice_channels(start, len);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Slice { x, start }, rg))
    }

    /// `[B, C, h, w]` → `[B·h·w, C]`, rows ordered sample-major then row-major
    /// over the spatial grid.
    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return shape_err("to_rows", format!("{s:?}"));
        }
        let (b, c, p) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for pi in 0..p {
                    out[(bi * p + pi) * c + ci] = src[(bi * c + ci) * p + pi];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b * p, c], out), Op::ToRows(x), rg))
    }

    /// Inverse of [`Graph::to_rows`] into a `[b, c, h, w]` map.
    pub fn from_rows(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || s[0] != b * h * w {
            return shape_err("from_rows", format!("{s:?} into {b}x?x{h}x{w}"));
        }
        let (c, p) = (s[1], h * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for pi in 0..p {
                    out[(bi * c + ci) * p + pi] = src[(bi * p + pi) * c + ci];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, c, h, w], out), Op::FromRows(x), rg))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return shape_err("normalize_rows", format!("{s:?}"));
        }
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(s[1]) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_EPS);
            for a in row {
                *a /= n;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::NormalizeRows(x), rg))
    }

    /// `[m, k]·[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        gemm(sa[0], sa[1], sb[1], self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[sa[0], sb[1]], out), Op::MatMul(a, b), rg))
    }

    /// `[m, k]·[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("matmul_nt", format!("{sa:?} x {sb:?}ᵀ"));
        }
        let mut out = vec![0.0; sa[0] * sb[0]];
        gemm(sa[0], sa[1], sb[0], self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[sa[0], sb[0]], out), Op::MatMulNT(a, b), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return shape_err("softmax_rows", format!("{s:?}"));
        }
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(s[1]) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::SoftmaxRows(x), rg))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src).shape().to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return shape_err("gather_rows", format!("{s:?} indices out of range"));
        }
        let c = s[1];
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_vec(&[idx.len(), c], out),
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean norm of every row of `[r, c]` → `[r]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return shape_err("row_norms", format!("{s:?}"));
        }
        let v: Vec<f64> = self
            .value(x)
            .data()
            .chunks(s[1])
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[s[0]], v), Op::RowNorms(x), rg))
    }

    /// Euclidean norm of each sample of a batched tensor → `[B]`.
    pub fn sample_norms(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let b = t.dim(0);
        let per = t.len() / b.max(1);
        let v: Vec<f64> = t
            .data()
            .chunks(per)
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[b], v), Op::SampleNorms(x), rg)
    }

    /// Sum consecutive equal-length segments of a flat tensor → `[segments]`.
    pub fn segment_sum(&mut self, x: Var, segments: usize) -> Result<Var> {
        let n = self.value(x).len();
        if segments == 0 || !n.is_multiple_of(segments) {
            return shape_err("segment_sum", format!("{n} values into {segments} segments"));
        }
        let v: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n / segments)
            .map(|c| c.iter().sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[segments], v), Op::SegmentSum(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, ho, wo) = (ws[0], y.dim(2), y.dim(3));
                let kk = c * geom.kernel * geom.kernel;
                let n = bsz * ho * wo;
                let dym = batch_to_channel_major(dy.data(), bsz, co, ho * wo);
                if self.rg(*w) {
                    let mut dw = vec![0.0; co * kk];
                    gemm(co, n, kk, &dym, false, cols, true, &mut dw, 0.0);
                    acc(*w, Tensor::from_vec(ws, dw), grads);
                }
                if let Some(bv) = b {
                    let db: Vec<f64> = dym.chunks(n).map(|r| r.iter().sum()).collect();
                    acc(*bv, Tensor::from_vec(self.value(*bv).shape(), db), grads);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, co, n, self.value(*w).data(), true, &dym, false, &mut dcols, 0.0);
                    let dx = col2im(&dcols, bsz, c, h, wd, *geom, ho, wo);
                    acc(*x, Tensor::from_vec(xs, dx), grads);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, x_mat } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, ho, wo) = (ws[1], y.dim(2), y.dim(3));
                let kk = co * geom.kernel * geom.kernel;
                let n = bsz * h * wd;
                let dcols = im2col(dy.data(), bsz, co, ho, wo, *geom, h, wd);
                if self.rg(*w) {
                    let mut dw = vec![0.0; cin * kk];
                    gemm(cin, n, kk, x_mat, false, &dcols, true, &mut dw, 0.0);
                    acc(*w, Tensor::from_vec(ws, dw), grads);
                }
                if let Some(bv) = b {
                    let mut db = vec![0.0; co];
                    for (i, chunk) in dy.data().chunks(ho * wo).enumerate() {
                        db[i % co] += chunk.iter().sum::<f64>();
                    }
                    acc(*bv, Tensor::from_vec(self.value(*bv).shape(), db), grads);
                }
                if self.rg(*x) {
                    let mut dxm = vec![0.0; cin * n];
                    gemm(cin, kk, n, self.value(*w).data(), false, &dcols, false, &mut dxm, 0.0);
                    let dx = channel_major_to_batch(&dxm, bsz, cin, h * wd);
                    acc(*x, Tensor::from_vec(xs, dx), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.zip_map(self.value(*b), |g, v| g * v), grads);
                }
                if self.rg(*b) {
                    acc(*b, dy.zip_map(self.value(*a), |g, v| g * v), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, dy.map(|g| g * s), grads),
            Op::AddScalar(a) => acc(*a, dy.clone(), grads),
            Op::Sigmoid(a) => acc(*a, dy.zip_map(y, |g, s| g * s * (1.0 - s)), grads),
            Op::Tanh(a) => acc(*a, dy.zip_map(y, |g, t| g * (1.0 - t * t)), grads),
            Op::Silu(a) => {
                let d = dy.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                acc(*a, d, grads);
            }
            Op::Relu(a) => {
                let d = dy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                acc(*a, d, grads);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).dim(1);
                    if self.rg(p) {
                        acc(p, dy.slice_channels(start, c), grads);
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.value(*x).shape();
                let (b, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let len = y.dim(1);
                let mut dx = Tensor::zeros(xs);
                for bi in 0..b {
                    let dst = (bi * c + start) * inner;
                    let src = bi * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&dy.data()[src..src + len * inner]);
                }
                acc(*x, dx, grads);
            }
            Op::ToRows(x) => {
                let xs = self.value(*x).shape();
                let (b, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![0.0; dy.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for pi in 0..p {
                            dx[(bi * c + ci) * p + pi] = dy.data()[(bi * p + pi) * c + ci];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(xs, dx), grads);
            }
            Op::FromRows(x) => {
                let (b, c, p) = (y.dim(0), y.dim(1), y.dim(2) * y.dim(3));
                let mut dx = vec![0.0; dy.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for pi in 0..p {
                            dx[(bi * p + pi) * c + ci] = dy.data()[(bi * c + ci) * p + pi];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(self.value(*x).shape(), dx), grads);
            }
            Op::NormalizeRows(x) => {
                let c = y.dim(1);
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for ((dxr, (yr, gr)), xr) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c).zip(dy.data().chunks(c)))
                    .zip(xv.data().chunks(c))
                {
                    let n = xr.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if n <= NORM_EPS {
                        for (d, g) in dxr.iter_mut().zip(gr) {
                            *d = g / NORM_EPS;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), g) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = (g - yv * dot) / n;
                    }
                }
                acc(*x, dx, grads);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, self.value(*b).data(), true, &mut da, 0.0);
                    acc(*a, Tensor::from_vec(sa, da), grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, dy.data(), false, &mut db, 0.0);
                    acc(*b, Tensor::from_vec(sb, db), grads);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, self.value(*b).data(), false, &mut da, 0.0);
                    acc(*a, Tensor::from_vec(sa, da), grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, dy.data(), true, self.value(*a).data(), false, &mut db, 0.0);
                    acc(*b, Tensor::from_vec(sb, db), grads);
                }
            }
            Op::SoftmaxRows(x) => {
                let c = y.dim(1);
                let mut dx = Tensor::zeros(y.shape());
                for (dxr, (yr, gr)) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c).zip(dy.data().chunks(c)))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), g) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (g - dot);
                    }
                }
                acc(*x, dx, grads);
            }
            Op::GatherRows { src, idx } => {
                let ss = self.value(*src).shape();
                let c = ss[1];
                let mut dsrc = Tensor::zeros(ss);
                for (r, &i) in idx.iter().enumerate() {
                    let g = &dy.data()[r * c..(r + 1) * c];
                    for (d, v) in dsrc.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g) {
                        *d += v;
                    }
                }
                acc(*src, dsrc, grads);
            }
            Op::RowNorms(x) => {
                let xv = self.value(*x);
                let c = xv.dim(1);
                let mut dx = Tensor::zeros(xv.shape());
                for (r, (dxr, xr)) in dx.data_mut().chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                    let n = y.data()[r];
                    if n > 0.0 {
                        let g = dy.data()[r] / n;
                        for (d, v) in dxr.iter_mut().zip(xr) {
                            *d = g * v;
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::SampleNorms(x) => {
                let xv = self.value(*x);
                let per = xv.len() / y.len().max(1);
                let mut dx = Tensor::zeros(xv.shape());
                for (s, (dxr, xr)) in dx.data_mut().chunks_mut(per).zip(xv.data().chunks(per)).enumerate() {
                    let n = y.data()[s];
                    if n > 0.0 {
                        let g = dy.data()[s] / n;
                        for (d, v) in dxr.iter_mut().zip(xr) {
                            *d = g * v;
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::SegmentSum(x) => {
                let xv = self.value(*x);
                let per = xv.len() / y.len();
                let dx: Vec<f64> = (0..xv.len()).map(|i| dy.data()[i / per]).collect();
                acc(*x, Tensor::from_vec(xv.shape(), dx), grads);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), g), grads);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.data()[0] / xv.len() as f64;
                acc(*x, Tensor::full(xv.shape(), g), grads);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter, zero-filled where no path exists.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .bound_params()
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
