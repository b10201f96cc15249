//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and stores a
//! gradient for every node that depends on a leaf marked as requiring one.
//! Intermediate gradients stay queryable afterwards (Grad-CAM reads them).

use super::kernels::{self, ConvGeom, GroupNormCache};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    GlobalAveragePool,
    UpsampleNearest,
    UpsampleBilinear,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Gap(Var),
    UpNearest(Var, usize),
    UpBilinear(Var, usize),
    AvgPool2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache<T>,
    },
    MulChannelGate {
        x: Var,
        gate: Var,
    },
    MulSpatialVec {
        x: Var,
        v: Var,
    },
    SumChannels(Var),
    SoftmaxSpatial(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowNorm(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{what}: shape mismatch {a:?} vs {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    // ---- forward primitives -------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(mismatch("conv2d bias", self.shape(b), &[geom.o]));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.n, geom.o, geom.oh, geom.ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(vb, f).map_err(|_| mismatch(what, va.shape(), vb.shape()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Shift(a), &[a])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
                self.push(v, Op::Relu(x), &[x])
            }
            Activation::Sigmoid => {
                let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
                self.push(v, Op::Sigmoid(x), &[x])
            }
            Activation::Tanh => {
                let v = self.value(x).map(|a| a.tanh());
                self.push(v, Op::Tanh(x), &[x])
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    /// Global average pool (NCHW → NC) or nearest/bilinear upsampling by
    /// an integer factor.
    pub fn pool_resize(&mut self, x: Var, mode: Resample, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        match mode {
            Resample::GlobalAveragePool => {
                let data: Vec<T> = self
                    .value(x)
                    .data()
                    .chunks(h * w)
                    .map(kernels::shifted_mean)
                    .collect();
                let v = Tensor::new(&[n, c], data)?;
                Ok(self.push(v, Op::Gap(x), &[x]))
            }
            Resample::UpsampleNearest | Resample::UpsampleBilinear if factor == 0 => {
                Err(Error::contract("upsample factor must be ≥ 1"))
            }
            Resample::UpsampleNearest => {
                let src = self.value(x).data();
                let (oh, ow) = (h * factor, w * factor);
                let mut out = Vec::with_capacity(n * c * oh * ow);
                for p in 0..n * c {
                    for oy in 0..oh {
                        let row = &src[p * h * w + (oy / factor) * w..][..w];
                        out.extend((0..ow).map(|ox| row[ox / factor]));
                    }
                }
                let v = Tensor::new(&[n, c, oh, ow], out)?;
                Ok(self.push(v, Op::UpNearest(x, factor), &[x]))
            }
            Resample::UpsampleBilinear => {
                let out = kernels::upsample_bilinear_forward((n, c, h, w), factor, self.value(x).data());
                let v = Tensor::new(&[n, c, h * factor, w * factor], out)?;
                Ok(self.push(v, Op::UpBilinear(x, factor), &[x]))
            }
        }
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        self.pool_resize(x, Resample::GlobalAveragePool, 1)
    }

    /// 2×2 average pooling, output size `ceil(H/2)×ceil(W/2)`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let out = kernels::avg_pool2_forward(dims, self.value(x).data());
        let v = Tensor::new(&[dims.0, dims.1, dims.2.div_ceil(2), dims.3.div_ceil(2)], out)?;
        Ok(self.push(v, Op::AvgPool2(x), &[x]))
    }

    /// `y = xW + b` for `x: N×F`, `W: F×K`, `b: K`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (f2, k) = self.value(w).dims2()?;
        if f != f2 {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [k] {
            return Err(mismatch("linear bias", self.shape(b), &[k]));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            for j in 0..k {
                let mut acc = bv[j];
                for i in 0..f {
                    acc = acc + xv[r * f + i] * wv[i * k + j];
                }
                out.push(acc);
            }
        }
        let v = Tensor::new(&[n, k], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Concatenate along dimension 1 (channels for NCHW, features for N×F).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::contract("concat needs rank ≥ 2"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(mismatch("concat", s, &base));
            }
            channels += s[1];
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[s * chunk..(s + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `[start, start+len)` along dimension 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::contract(format!("slice [{start}, {}) out of {s:?}", start + len)));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            let off = (n * s[1] + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, start }, &[x]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if groups == 0 || dims.1 % groups != 0 {
            return Err(Error::contract(format!("{} channels not divisible into {groups} groups", dims.1)));
        }
        if self.shape(gamma) != [dims.1] || self.shape(beta) != [dims.1] {
            return Err(Error::contract("group_norm affine parameters must have C entries"));
        }
        let (y, cache) = kernels::group_norm_forward(
            dims,
            groups,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = Tensor::new(self.shape(x), y)?;
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// `x[n,c,h,w] · gate[n,0,h,w]`.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(mismatch("gate", self.shape(gate), &[n, 1, h, w]));
        }
        let (xv, gv) = (self.value(x).data(), self.value(gate).data());
        let hw = h * w;
        let out = (0..n * c * hw)
            .map(|i| xv[i] * gv[(i / (c * hw)) * hw + i % hw])
            .collect();
        let v = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(v, Op::MulChannelGate { x, gate }, &[x, gate]))
    }

    /// `x[n,c,h,w] · v[n,c]`.
    pub fn mul_spatial_vec(&mut self, x: Var, vec: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(vec) != [n, c] {
            return Err(mismatch("spatial broadcast", self.shape(vec), &[n, c]));
        }
        let (xv, vv) = (self.value(x).data(), self.value(vec).data());
        let hw = h * w;
        let out = (0..n * c * hw).map(|i| xv[i] * vv[i / hw]).collect();
        let v = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(v, Op::MulSpatialVec { x, v: vec }, &[x, vec]))
    }

    /// Sum over channels: NCHW → N×1×H×W.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &xv[(s * c + ch) * hw..][..hw];
                for (o, &v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        let v = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.push(v, Op::SumChannels(x), &[x]))
    }

    /// Softmax over the spatial positions of every (n, c) plane.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let mut out = self.value(x).data().to_vec();
        for plane in out.chunks_mut(h * w) {
            let m = plane.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in plane.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in plane.iter_mut() {
                *v = *v / s;
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(v, Op::SoftmaxSpatial(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::contract(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let s = row.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
            let lse = m + s.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&b| (b - lse).exp()));
        }
        let v = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Rows of an N×D tensor, with repetition allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("row {bad} out of {n}")));
        }
        let v = self.value(x).select(rows);
        debug_assert_eq!(v.shape(), &[rows.len(), d]);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Euclidean norm of every row: M×D → M.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let out = (0..m)
            .map(|r| xv[r * d..(r + 1) * d].iter().fold(T::zero(), |a, &b| a + b * b).sqrt())
            .collect();
        let v = Tensor::new(&[m], out)?;
        Ok(self.push(v, Op::RowNorm(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    // ---- reverse pass --------------------------------------------------

    /// Populate gradients of the scalar `loss` with respect to every node
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {:?}", lv.item())));
        }
        let seed = Tensor::full(lv.shape(), T::one());
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(seed);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&mut self, v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = Tensor::new(self.shape(v), data).expect("gradient shape");
        self.acc(v, g);
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) {
        // Borrow the op out temporarily so parent values remain readable.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let gd = g.data();
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.wants(*x) {
                    let gx = kernels::conv2d_grad_input(geom, self.value(*w).data(), gd);
                    self.acc_data(*x, gx);
                }
                let need_b = b.is_some_and(|b| self.wants(b));
                if self.wants(*w) || need_b {
                    let (gw, gb) = kernels::conv2d_grad_params(geom, self.value(*x).data(), gd);
                    self.acc_data(*w, gw);
                    if let Some(b) = b {
                        self.acc_data(*b, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("mul grad");
                    self.acc(*a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("mul grad");
                    self.acc(*b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, g.map(|v| v * s));
            }
            Op::Shift(a) => self.acc(*a, g.clone()),
            Op::Relu(x) => {
                let gx = g
                    .zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("relu grad");
                self.acc(*x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .zip_map(&self.nodes[id].value, |gv, y| gv * y * (T::one() - y))
                    .expect("sigmoid grad");
                self.acc(*x, gx);
            }
            Op::Tanh(x) => {
                let gx = g
                    .zip_map(&self.nodes[id].value, |gv, y| gv * (T::one() - y * y))
                    .expect("tanh grad");
                self.acc(*x, gx);
            }
            Op::Abs(x) => {
                let gx = g
                    .zip_map(self.value(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .expect("abs grad");
                self.acc(*x, gx);
            }
            Op::Gap(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("gap input");
                let inv = T::of(1.0 / (h * w) as f64);
                let data = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, h * w)).collect();
                self.acc_data(*x, data);
            }
            Op::UpNearest(x, f) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("upsample input");
                let (oh, ow) = (h * f, w * f);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let t = p * h * w + (oy / f) * w + ox / f;
                            gx[t] = gx[t] + gd[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
                self.acc_data(*x, gx);
            }
            Op::UpBilinear(x, f) => {
                let dims = self.value(*x).dims4().expect("upsample input");
                let gx = kernels::upsample_bilinear_backward(dims, *f, gd);
                self.acc_data(*x, gx);
            }
            Op::AvgPool2(x) => {
                let dims = self.value(*x).dims4().expect("pool input");
                let gx = kernels::avg_pool2_backward(dims, gd);
                self.acc_data(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (n, f) = self.value(*x).dims2().expect("linear x");
                let k = self.shape(*w)[1];
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let gx = (0..n * f)
                        .map(|idx| {
                            let (r, i) = (idx / f, idx % f);
                            (0..k).fold(T::zero(), |a, j| a + gd[r * k + j] * wv[i * k + j])
                        })
                        .collect();
                    self.acc_data(*x, gx);
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let gw = (0..f * k)
                        .map(|idx| {
                            let (i, j) = (idx / k, idx % k);
                            (0..n).fold(T::zero(), |a, r| a + xv[r * f + i] * gd[r * k + j])
                        })
                        .collect();
                    self.acc_data(*w, gw);
                }
                let gb = (0..k).map(|j| (0..n).fold(T::zero(), |a, r| a + gd[r * k + j])).collect();
                self.acc_data(*b, gb);
            }
            Op::Concat(parts) => {
                let shape = g.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[1] * inner;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * chunk);
                        for s in 0..n {
                            gp.extend_from_slice(&gd[s * total + offset..s * total + offset + chunk]);
                        }
                        self.acc_data(p, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[2..].iter().product();
                let len = g.shape()[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for n in 0..xs[0] {
                    let dst = (n * xs[1] + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[n * len * inner..(n + 1) * len * inner]);
                }
                self.acc_data(*x, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            } => {
                let dims = self.value(*x).dims4().expect("group norm input");
                let (gx, gg, gb) =
                    kernels::group_norm_backward(dims, *groups, cache, self.value(*gamma).data(), gd);
                self.acc_data(*x, gx);
                self.acc_data(*gamma, gg);
                self.acc_data(*beta, gb);
            }
            Op::MulChannelGate { x, gate } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("gate input");
                let hw = h * w;
                if self.wants(*x) {
                    let gv = self.value(*gate).data();
                    let gx = (0..n * c * hw).map(|i| gd[i] * gv[(i / (c * hw)) * hw + i % hw]).collect();
                    self.acc_data(*x, gx);
                }
                if self.wants(*gate) {
                    let xv = self.value(*x).data();
                    let mut gg = vec![T::zero(); n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                gg[s * hw + p] = gg[s * hw + p] + gd[base + p] * xv[base + p];
                            }
                        }
                    }
                    self.acc_data(*gate, gg);
                }
            }
            Op::MulSpatialVec { x, v } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("broadcast input");
                let hw = h * w;
                if self.wants(*x) {
                    let vv = self.value(*v).data();
                    let gx = (0..n * c * hw).map(|i| gd[i] * vv[i / hw]).collect();
                    self.acc_data(*x, gx);
                }
                if self.wants(*v) {
                    let xv = self.value(*x).data();
                    let gv = (0..n * c)
                        .map(|p| (0..hw).fold(T::zero(), |a, i| a + gd[p * hw + i] * xv[p * hw + i]))
                        .collect();
                    self.acc_data(*v, gv);
                }
            }
            Op::SumChannels(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("sum input");
                let hw = h * w;
                let gx = (0..n * c * hw).map(|i| gd[(i / (c * hw)) * hw + i % hw]).collect();
                self.acc_data(*x, gx);
            }
            Op::SoftmaxSpatial(x) => {
                let y = self.nodes[id].value.data();
                let (_, _, h, w) = self.value(*x).dims4().expect("softmax input");
                let mut gx = vec![T::zero(); y.len()];
                for ((gxp, yp), gp) in gx.chunks_mut(h * w).zip(y.chunks(h * w)).zip(gd.chunks(h * w)) {
                    let dot = yp.iter().zip(gp).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for ((o, &yv), &gv) in gxp.iter_mut().zip(yp).zip(gp) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc_data(*x, gx);
            }
            Op::Sum(x) => {
                let s = g.item();
                let gx = Tensor::full(self.shape(*x), s);
                self.acc(*x, gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gx = Tensor::full(self.shape(*x), g.item() / T::of(n as f64));
                self.acc(*x, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g.item() / T::of(n as f64);
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * k + l] = gx[r * k + l] - T::one();
                }
                gx.iter_mut().for_each(|v| *v = *v * scale);
                self.acc_data(*logits, gx);
            }
            Op::GatherRows { x, rows } => {
                let (n, d) = self.value(*x).dims2().expect("gather input");
                let mut gx = vec![T::zero(); n * d];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] = gx[r * d + j] + gd[i * d + j];
                    }
                }
                self.acc_data(*x, gx);
            }
            Op::RowNorm(x) => {
                let (m, d) = self.value(*x).dims2().expect("norm input");
                let xv = self.value(*x).data();
                let y = self.nodes[id].value.data();
                let gx = (0..m * d)
                    .map(|i| {
                        let r = i / d;
                        if y[r] > T::zero() {
                            gd[r] * xv[i] / y[r]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc_data(*x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                self.acc(*x, gx);
            }
        }
        self.nodes[id].op = op;
    }
}
