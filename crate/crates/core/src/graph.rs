//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are pulled in from a
//! [`ParamStore`](crate::nn::ParamStore) either as trainable leaves or as frozen leaves that
//! still pass gradients through to their inputs but never accumulate a gradient themselves.

use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{col2im, im2col, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    ConvT2d(Var, Var, ConvGeom),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    ClampMin(Var, T),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    SumLast(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    TileSpatial(Var),
    Upsample(Var, usize),
    MulChannelBroadcast(Var, Var),
    AddMidBroadcast(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Split of a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Trainable parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_impl(store, id, true)
    }

    /// Parameter leaf whose gradient is not needed (gradients still flow to its consumers' inputs).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_impl(store, id, false)
    }

    fn param_impl(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        let slot = id.index();
        if self.param_vars.len() <= slot {
            self.param_vars.resize(slot + 1, None);
        }
        if let Some(v) = self.param_vars[slot] {
            if self.nodes[v.0].needs_grad == trainable {
                return v;
            }
        }
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.param_vars[slot] = Some(v);
        v
    }

    // ---- elementwise -------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let ng = self.ng(a);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        self.push(t, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        let t = self.value(a).map(|x| x.max(lo));
        let ng = self.ng(a);
        self.push(t, Op::ClampMin(a, lo), ng)
    }

    /// `x[N, C] + b[C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(b).len();
        let mut t = self.value(x).clone();
        assert_eq!(t.len() % c, 0, "row bias width mismatch");
        let bias = self.value(b).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddRowBias(x, b), ng)
    }

    /// `x[B, C, H, W] + b[C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        assert_eq!(self.value(b).len(), c);
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, plane) in t.data_mut().chunks_mut(hw).enumerate() {
            let bv = bias[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddChannelBias(x, b), ng)
    }

    // ---- linear algebra ----------------------------------------------------------------

    /// `a[m, k] x b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a[B, m, k] x b[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bn * m * n];
        for i in 0..bn {
            matmul_acc(self.value(a).outer(i), self.value(b).outer(i), &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[bn, m, n], out), Op::BatchMatMul(a, b), ng)
    }

    /// Cross-correlation of `x[B, C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let g = ConvGeom { in_ch: xs[1], in_h: xs[2], in_w: xs[3], kernel: ws[2], stride, pad };
        let (oc, rows, cols) = (ws[0], g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); xs[0] * oc * cols];
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..xs[0] {
            im2col(self.value(x).outer(b), &g, &mut col);
            matmul_acc(self.value(w).data(), &col, &mut out[b * oc * cols..(b + 1) * oc * cols], oc, rows, cols);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(&[xs[0], oc, g.out_h(), g.out_w()], out), Op::Conv2d(x, w, g), ng)
    }

    /// Transposed convolution of `x[B, C, h, w]` with `w[C, O, k, k]` (the adjoint of [`Graph::conv2d`]).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        let k = ws[2];
        let oh = (xs[2] - 1) * stride + k - 2 * pad;
        let ow = (xs[3] - 1) * stride + k - 2 * pad;
        let g = ConvGeom { in_ch: ws[1], in_h: oh, in_w: ow, kernel: k, stride, pad };
        debug_assert_eq!(g.out_h(), xs[2]);
        let (ic, rows, cols) = (xs[1], g.col_rows(), g.col_cols());
        let plane = ws[1] * oh * ow;
        let mut out = vec![T::zero(); xs[0] * plane];
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..xs[0] {
            col.iter_mut().for_each(|v| *v = T::zero());
            matmul_at_b_acc(self.value(w).data(), self.value(x).outer(b), &mut col, ic, rows, cols);
            col2im(&col, &g, &mut out[b * plane..(b + 1) * plane]);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(&[xs[0], ws[1], oh, ow], out), Op::ConvT2d(x, w, g), ng)
    }

    // ---- shape -------------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let base = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p);
                assert_eq!(s.len(), base.len());
                let len = s[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&shape, out), Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[axis], "slice out of range");
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let data = self.value(a).data();
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Slice(a, axis, start), ng)
    }

    /// `[B, C] -> [B, C, h, w]` by spatial repetition.
    pub fn tile_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for &v in self.value(a).data() {
            out.extend(core::iter::repeat(v).take(h * w));
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[s[0], s[1], h, w], out), Op::TileSpatial(a), ng)
    }

    /// Nearest-neighbour upsampling of `[B, C, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * oh * ow];
        let src = self.value(a).data();
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    out[p * oh * ow + y * ow + x] = src[p * h * w + (y / factor) * w + x / factor];
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[s[0], s[1], oh, ow], out), Op::Upsample(a, factor), ng)
    }

    /// `x[B, C, H, W] * m[B, 1, H, W]` broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Var {
        let s = self.shape(x).to_vec();
        let hw = s[2] * s[3];
        assert_eq!(self.shape(m), &[s[0], 1, s[2], s[3]]);
        let mut t = self.value(x).clone();
        let mask = self.value(m).data();
        for (i, plane) in t.data_mut().chunks_mut(hw).enumerate() {
            let b = i / s[1];
            for (v, &mv) in plane.iter_mut().zip(&mask[b * hw..(b + 1) * hw]) {
                *v *= mv;
            }
        }
        let ng = self.ng(x) || self.ng(m);
        self.push(t, Op::MulChannelBroadcast(x, m), ng)
    }

    /// `x[B, K, D] + u[B, D]` with `u` repeated over the middle axis.
    pub fn add_mid_broadcast(&mut self, x: Var, u: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(u), &[s[0], s[2]]);
        let mut t = self.value(x).clone();
        let uu = self.value(u).data();
        for (i, row) in t.data_mut().chunks_mut(s[2]).enumerate() {
            let b = i / s[1];
            for (v, &w) in row.iter_mut().zip(&uu[b * s[2]..(b + 1) * s[2]]) {
                *v += w;
            }
        }
        let ng = self.ng(x) || self.ng(u);
        self.push(t, Op::AddMidBroadcast(x, u), ng)
    }

    // ---- reductions --------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let out: Vec<T> = self.value(a).data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::SumLast(a), ng)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().unwrap();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(d) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Row-wise log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let out: Vec<T> = self.value(a).data().chunks(d).map(logsumexp).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::LogSumExp(a), ng)
    }

    // ---- backward ----------------------------------------------------------------------

    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(self.value(root).shape(), vec![T::one()]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accum(grads, *a, gy.map(|g| g * k));
            }
            Op::AddRowBias(x, b) => {
                self.accum(grads, *x, gy.clone());
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for row in gy.data().chunks(c) {
                        for (acc, &g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accum(grads, *b, Tensor::new(self.value(*b).shape(), gb));
                }
            }
            Op::AddChannelBias(x, b) => {
                self.accum(grads, *x, gy.clone());
                if self.ng(*b) {
                    let s = gy.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut gb = vec![T::zero(); c];
                    for (p, plane) in gy.data().chunks(hw).enumerate() {
                        gb[p % c] += plane.iter().copied().sum();
                    }
                    self.accum(grads, *b, Tensor::new(self.value(*b).shape(), gb));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_a_bt_acc(gy.data(), self.value(*b).data(), &mut ga, m, n, k);
                    self.accum(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_at_b_acc(self.value(*a).data(), gy.data(), &mut gb, m, k, n);
                    self.accum(grads, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a).to_vec();
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); bn * m * k];
                    for i in 0..bn {
                        matmul_a_bt_acc(gy.outer(i), self.value(*b).outer(i), &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                    self.accum(grads, *a, Tensor::new(&sa, ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); bn * k * n];
                    for i in 0..bn {
                        matmul_at_b_acc(self.value(*a).outer(i), gy.outer(i), &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                    self.accum(grads, *b, Tensor::new(&[bn, k, n], gb));
                }
            }
            Op::Conv2d(x, w, g) => {
                let bn = self.shape(*x)[0];
                let ws = self.shape(*w).to_vec();
                let (oc, rows, cols) = (ws[0], g.col_rows(), g.col_cols());
                let wdata = self.value(*w).data();
                let mut col = vec![T::zero(); rows * cols];
                let mut gw = if self.ng(*w) { Some(vec![T::zero(); oc * rows]) } else { None };
                let mut gx = if self.ng(*x) { Some(vec![T::zero(); self.value(*x).len()]) } else { None };
                let plane = g.in_ch * g.in_h * g.in_w;
                for b in 0..bn {
                    let gyb = gy.outer(b);
                    if let Some(gw) = gw.as_mut() {
                        im2col(self.value(*x).outer(b), g, &mut col);
                        matmul_a_bt_acc(gyb, &col, gw, oc, cols, rows);
                    }
                    if let Some(gx) = gx.as_mut() {
                        col.iter_mut().for_each(|v| *v = T::zero());
                        matmul_at_b_acc(wdata, gyb, &mut col, oc, rows, cols);
                        col2im(&col, g, &mut gx[b * plane..(b + 1) * plane]);
                    }
                }
                if let Some(gw) = gw {
                    self.accum(grads, *w, Tensor::new(&ws, gw));
                }
                if let Some(gx) = gx {
                    self.accum(grads, *x, Tensor::new(self.shape(*x), gx));
                }
            }
            Op::ConvT2d(x, w, g) => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (ic, rows, cols) = (xs[1], g.col_rows(), g.col_cols());
                let wdata = self.value(*w).data();
                let mut col = vec![T::zero(); rows * cols];
                let mut gw = if self.ng(*w) { Some(vec![T::zero(); ic * rows]) } else { None };
                let mut gx = if self.ng(*x) { Some(vec![T::zero(); self.value(*x).len()]) } else { None };
                for b in 0..xs[0] {
                    im2col(gy.outer(b), g, &mut col);
                    if let Some(gw) = gw.as_mut() {
                        matmul_a_bt_acc(self.value(*x).outer(b), &col, gw, ic, cols, rows);
                    }
                    if let Some(gx) = gx.as_mut() {
                        matmul_acc(wdata, &col, &mut gx[b * ic * cols..(b + 1) * ic * cols], ic, rows, cols);
                    }
                }
                if let Some(gw) = gw {
                    self.accum(grads, *w, Tensor::new(&ws, gw));
                }
                if let Some(gx) = gx {
                    self.accum(grads, *x, Tensor::new(&xs, gx));
                }
            }
            Op::Relu(a) => {
                let ga = gy.zip_map(y, |g, v| if v > T::zero() { g } else { T::zero() });
                self.accum(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = gy.zip_map(self.value(*a), |g, v| if v > T::zero() { g } else { g * s });
                self.accum(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = gy.zip_map(y, |g, s| g * s * (T::one() - s));
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = gy.zip_map(y, |g, t| g * (T::one() - t * t));
                self.accum(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = gy.zip_map(y, |g, e| g * e);
                self.accum(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = gy.zip_map(self.value(*a), |g, v| g / v);
                self.accum(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let ga = gy.zip_map(self.value(*a), |g, v| g * two * v);
                self.accum(grads, *a, ga);
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let ga = gy.zip_map(self.value(*a), |g, v| if v > lo { g } else { T::zero() });
                self.accum(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = gy.clone().reshaped(self.shape(*a));
                self.accum(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(gy.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&gy.data()[base..base + n * inner]);
                        }
                        self.accum(grads, p, Tensor::new(self.shape(p), gp));
                    }
                    offset += n;
                }
            }
            Op::Slice(a, axis, start) => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = gy.shape()[*axis];
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&gy.data()[src..src + len * inner]);
                }
                self.accum(grads, *a, Tensor::new(&s, ga));
            }
            Op::Sum(a) => {
                let g = gy.item();
                self.accum(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::SumLast(a) => {
                let s = self.shape(*a).to_vec();
                let d = *s.last().unwrap();
                let mut ga = Vec::with_capacity(self.value(*a).len());
                for &g in gy.data() {
                    ga.extend(core::iter::repeat(g).take(d));
                }
                self.accum(grads, *a, Tensor::new(&s, ga));
            }
            Op::LogSoftmax(a) => {
                let d = *y.shape().last().unwrap();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(d).zip(gy.data().chunks(d)) {
                    let gs: T = gr.iter().copied().sum();
                    ga.extend(yr.iter().zip(gr).map(|(&lp, &g)| g - lp.exp() * gs));
                }
                self.accum(grads, *a, Tensor::new(y.shape(), ga));
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let d = *x.shape().last().unwrap();
                let mut ga = Vec::with_capacity(x.len());
                for ((xr, &lse), &g) in x.data().chunks(d).zip(y.data()).zip(gy.data()) {
                    ga.extend(xr.iter().map(|&v| g * (v - lse).exp()));
                }
                self.accum(grads, *a, Tensor::new(x.shape(), ga));
            }
            Op::TileSpatial(a) => {
                let s = gy.shape();
                let hw = s[2] * s[3];
                let ga: Vec<T> = gy.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                self.accum(grads, *a, Tensor::new(self.shape(*a), ga));
            }
            Op::Upsample(a, f) => {
                let s = self.shape(*a).to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for p in 0..s[0] * s[1] {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            ga[p * h * w + (yy / f) * w + xx / f] += gy.data()[p * oh * ow + yy * ow + xx];
                        }
                    }
                }
                self.accum(grads, *a, Tensor::new(&s, ga));
            }
            Op::MulChannelBroadcast(x, m) => {
                let s = gy.shape().to_vec();
                let hw = s[2] * s[3];
                if self.ng(*x) {
                    let mask = self.value(*m).data();
                    let mut gx = gy.clone();
                    for (i, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let b = i / s[1];
                        for (v, &mv) in plane.iter_mut().zip(&mask[b * hw..(b + 1) * hw]) {
                            *v *= mv;
                        }
                    }
                    self.accum(grads, *x, gx);
                }
                if self.ng(*m) {
                    let xv = self.value(*x).data();
                    let mut gm = vec![T::zero(); s[0] * hw];
                    for (i, (gp, xp)) in gy.data().chunks(hw).zip(xv.chunks(hw)).enumerate() {
                        let b = i / s[1];
                        for ((acc, &g), &xx) in gm[b * hw..(b + 1) * hw].iter_mut().zip(gp).zip(xp) {
                            *acc += g * xx;
                        }
                    }
                    self.accum(grads, *m, Tensor::new(self.shape(*m), gm));
                }
            }
            Op::AddMidBroadcast(x, u) => {
                self.accum(grads, *x, gy.clone());
                if self.ng(*u) {
                    let s = gy.shape().to_vec();
                    let mut gu = vec![T::zero(); s[0] * s[2]];
                    for (i, row) in gy.data().chunks(s[2]).enumerate() {
                        let b = i / s[1];
                        for (acc, &g) in gu[b * s[2]..(b + 1) * s[2]].iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accum(grads, *u, Tensor::new(self.shape(*u), gu));
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn logsumexp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter of `store`, indexed by [`ParamId`].
    pub fn for_params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; store.len()];
        for (slot, var) in graph.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if slot < out.len() && graph.nodes[v.0].needs_grad {
                    out[slot] = self.grads[v.0].clone();
                }
            }
        }
        out
    }
}
