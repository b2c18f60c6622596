//! Parameter storage, layers and the Adam optimizer.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names.iter().enumerate().filter(|(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i)).collect()
    }

    /// Total scalar count over `ids` (or every parameter when `ids` is `None`).
    pub fn count(&self, ids: Option<&[ParamId]>) -> usize {
        match ids {
            Some(ids) => ids.iter().map(|&i| self.tensors[i.0].len()).sum(),
            None => self.tensors.iter().map(|t| t.len()).sum(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }
}

/// A view of a [`ParamStore`] used while building one network's part of a graph.
#[derive(Clone, Copy)]
pub struct Bind<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Bind<'a, T> {
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false }
    }

    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}

fn uniform_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data)
}

/// He-style uniform bound for a leaky-ReLU network.
fn init_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / (1.04 * fan_in as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(&alloc::format!("{name}.w"), uniform_tensor(rng, &[in_dim, out_dim], init_bound(in_dim)));
        let b = store.add(&alloc::format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// `x[N, in] -> [N, out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.matmul(x, w);
        g.add_row_bias(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(&alloc::format!("{name}.w"), uniform_tensor(rng, &[out_ch, in_ch, kernel, kernel], init_bound(fan_in)));
        let b = store.add(&alloc::format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_channel_bias(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        // Each output pixel of a stride-s transposed conv sees about in_ch * (k/s)^2 inputs.
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let w = store.add(&alloc::format!("{name}.w"), uniform_tensor(rng, &[in_ch, out_ch, kernel, kernel], init_bound(fan_in)));
        let b = store.add(&alloc::format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.conv_transpose2d(x, w, self.stride, self.pad);
        g.add_channel_bias(y, b)
    }
}

/// Single LSTM layer; gate order in the fused weight is (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        let w_ih = store.add(&alloc::format!("{name}.w_ih"), uniform_tensor(rng, &[input, 4 * hidden], bound));
        let w_hh = store.add(&alloc::format!("{name}.w_hh"), uniform_tensor(rng, &[hidden, 4 * hidden], bound));
        let mut bias = vec![T::zero(); 4 * hidden];
        // forget-gate bias of 1 keeps early gradients alive through time
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        let b = store.add(&alloc::format!("{name}.b"), Tensor::new(&[4 * hidden], bias));
        Self { w_ih, w_hh, b, hidden }
    }

    /// One step: returns `(h', c')`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let w_ih = p.var(g, self.w_ih);
        let w_hh = p.var(g, self.w_hh);
        let b = p.var(g, self.b);
        let xi = g.matmul(x, w_ih);
        let hh = g.matmul(h, w_hh);
        let pre = g.add(xi, hh);
        let pre = g.add_row_bias(pre, b);
        let n = self.hidden;
        let i = g.slice(pre, 1, 0, n);
        let f = g.slice(pre, 1, n, n);
        let cc = g.slice(pre, 1, 2 * n, n);
        let o = g.slice(pre, 1, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cc);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}

/// Adam with bias correction over a fixed group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, ids: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<_> = ids.iter().map(|&i| Tensor::zeros(store.get(i).shape())).collect();
        let v = m.clone();
        Self { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, ids, m, v }
    }

    /// Applies one update from `grads` (indexed by [`ParamId`]); missing gradients count as zero.
    /// Returns the pre-clipping global gradient norm.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> f64 {
        let mut sq = 0.0;
        for &id in &self.ids {
            if let Some(Some(gr)) = grads.get(id.index()) {
                sq += gr.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        let norm = libm::sqrt(sq);
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(libm::sqrt(bc2));
        let eps = T::lit(self.eps);
        let sc = T::lit(scale);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(Some(gr)) = grads.get(id.index()) else { continue };
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pv, mv), vv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(gr.data()) {
                let gv = gv * sc;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]));
        let mut opt = Adam::new(&store, vec![id], 0.1);
        opt.beta1 = 0.9;
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let loss = g.sum(sq);
            let grads = g.backward(loss).for_params(&g, &store);
            opt.apply(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_receive_no_gradient_but_pass_it_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let input = store.add("input", Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]));
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let mut g = Graph::new();
        let x = g.param(&store, input);
        let y = lin.forward(&mut g, Bind::frozen(&store), x);
        let loss = g.sum(y);
        let grads = g.backward(loss).for_params(&g, &store);
        assert!(grads[lin.w.index()].is_none());
        assert!(grads[lin.b.index()].is_none());
        assert!(grads[input.index()].is_some());
    }
}
