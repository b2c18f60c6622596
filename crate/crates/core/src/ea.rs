//! Task-focused explicit attention: region scores, frame masking and pooled classification.
//!
//! Per region `k` of the `grid × grid` feature map:
//! `ψ_k = tanh(φ_k W_f + u)`, `p_k = sigmoid(ψ_k W_p)`, `p_tfa_k = max(p_k − t, 0)`.
//! The frame is multiplied by the nearest-neighbour upsampled `p_tfa`, and the
//! `p_tfa`-weighted sum of `φ` feeds two small classifiers for shape and color.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::losses::{cross_entropy, one_hot_rows};
use crate::nets::VisionConfig;
use crate::nn::{Bind, Conv2d, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::sim::{Frame, FrameKind};
use crate::task::TaskSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNet {
    pub convs: Vec<Conv2d>,
    pub task_embed: Linear,
    /// `[d_ψ, d_φ, 1, 1]`, i.e. `W_f` applied per region as a 1×1 convolution.
    pub w_f: ParamId,
    /// `[1, d_ψ, 1, 1]`.
    pub w_p: ParamId,
    pub shape_hidden: Linear,
    pub shape_out: Linear,
    pub color_hidden: Linear,
    pub color_out: Linear,
    pub grid: usize,
    pub threshold: f64,
    pub leak: f64,
}

/// Graph nodes of one attention pass, channel-first: `φ [B, d_φ, k, k]`, `p [B, 1, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub phi: Var,
    pub psi: Var,
    pub p: Var,
    pub p_tfa: Var,
}

/// Plain-value attention map of one frame, region-major: `phi_f[k]` is region `k`'s feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub phi_f: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub p_tfa: Vec<f64>,
    pub k_h: usize,
    pub k_w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub p_f: Vec<f64>,
    pub shape_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
}

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect())
}

impl AttentionNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &VisionConfig) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 3;
        let widths: Vec<usize> = cfg.attention_channels.iter().copied().chain([cfg.d_phi]).collect();
        for (i, &out) in widths.iter().enumerate() {
            convs.push(Conv2d::new(store, rng, &format!("{name}.conv{i}"), in_ch, out, 4, 2, 1));
            in_ch = out;
        }
        let task_embed = Linear::new(store, rng, &format!("{name}.u"), cfg.object_dim(), cfg.d_psi);
        let w_f = store.add(&format!("{name}.w_f"), uniform(rng, &[cfg.d_psi, cfg.d_phi, 1, 1], libm::sqrt(3.0 / cfg.d_phi as f64)));
        let w_p = store.add(&format!("{name}.w_p"), uniform(rng, &[1, cfg.d_psi, 1, 1], libm::sqrt(3.0 / cfg.d_psi as f64)));
        let shape_hidden = Linear::new(store, rng, &format!("{name}.tau1.h"), cfg.d_phi, cfg.head_hidden);
        let shape_out = Linear::new(store, rng, &format!("{name}.tau1.o"), cfg.head_hidden, cfg.n_shapes);
        let color_hidden = Linear::new(store, rng, &format!("{name}.tau2.h"), cfg.d_phi, cfg.head_hidden);
        let color_out = Linear::new(store, rng, &format!("{name}.tau2.o"), cfg.head_hidden, cfg.n_colors);
        Self { convs, task_embed, w_f, w_p, shape_hidden, shape_out, color_hidden, color_out, grid: cfg.grid, threshold: cfg.threshold, leak: cfg.leak }
    }

    /// `x[B, 3, H, W]`, `task[B, |s|+|c|]`.
    pub fn attend<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var, task: Var) -> AttentionVars {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, p, h);
            h = g.leaky_relu(y, T::lit(self.leak));
        }
        let phi = h;
        let s = g.shape(phi).to_vec();
        let w_f = p.var(g, self.w_f);
        let proj = g.conv2d(phi, w_f, 1, 0);
        let u = self.task_embed.forward(g, p, task);
        let u_tiled = g.tile_spatial(u, s[2], s[3]);
        let pre = g.add(proj, u_tiled);
        let psi = g.tanh(pre);
        let w_p = p.var(g, self.w_p);
        let logit = g.conv2d(psi, w_p, 1, 0);
        let prob = g.sigmoid(logit);
        let p_tfa = threshold_relu(g, prob, self.threshold);
        AttentionVars { phi, psi, p: prob, p_tfa }
    }

    /// Logits `(ŝ, ĉ)` from pooled features `[B, d_φ]`.
    pub fn classify<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, pooled: Var) -> (Var, Var) {
        let leak = T::lit(self.leak);
        let hs = self.shape_hidden.forward(g, p, pooled);
        let hs = g.leaky_relu(hs, leak);
        let s = self.shape_out.forward(g, p, hs);
        let hc = self.color_hidden.forward(g, p, pooled);
        let hc = g.leaky_relu(hc, leak);
        let c = self.color_out.forward(g, p, hc);
        (s, c)
    }
}

/// `max(p − t, 0)`.
pub fn threshold_relu<T: Real>(g: &mut Graph<T>, p: Var, t: f64) -> Var {
    let shape = g.shape(p).to_vec();
    let shift = g.constant(Tensor::full(&shape, T::lit(-t)));
    let d = g.add(p, shift);
    g.relu(d)
}

/// `x ⊗ upsample(p_tfa)`: `x[B, C, H, W]`, `p_tfa[B, 1, k, k]` with `k` dividing `H`.
pub fn mask_frames<T: Real>(g: &mut Graph<T>, x: Var, p_tfa: Var) -> Var {
    let factor = g.shape(x)[2] / g.shape(p_tfa)[2];
    let up = if factor == 1 { p_tfa } else { g.upsample_nearest(p_tfa, factor) };
    g.mul_channel_broadcast(x, up)
}

/// `Σ_k p_tfa_k φ_k`: `[B, d_φ]`.
pub fn pool<T: Real>(g: &mut Graph<T>, phi: Var, p_tfa: Var) -> Var {
    let s = g.shape(phi).to_vec();
    let weighted = g.mul_channel_broadcast(phi, p_tfa);
    let flat = g.reshape(weighted, &[s[0], s[1], s[2] * s[3]]);
    g.sum_last(flat)
}

/// `λ · mean_b(Σ_k p_tfa / K) + CE(ŝ, f_s) + CE(ĉ, f_c)`.
pub fn g_attention_loss<T: Real>(g: &mut Graph<T>, p_tfa: Var, s_logits: Var, c_logits: Var, shapes: &[usize], colors: &[usize], lambda: f64) -> Var {
    let s = g.shape(p_tfa).to_vec();
    let (b, k) = (s[0], s[1] * s[2] * s[3]);
    let total = g.sum(p_tfa);
    let sparse = g.scale(total, T::lit(lambda / (b * k) as f64));
    let (ns, nc) = (g.shape(s_logits)[1], g.shape(c_logits)[1]);
    let ce_s = cross_entropy(g, s_logits, one_hot_rows(shapes, ns));
    let ce_c = cross_entropy(g, c_logits, one_hot_rows(colors, nc));
    let ce = g.add(ce_s, ce_c);
    g.add(sparse, ce)
}

/// Region-major maps for each batch row.
pub fn read_maps<T: Real>(g: &Graph<T>, vars: &AttentionVars) -> Vec<AttentionMap> {
    let phi = g.value(vars.phi);
    let psi = g.value(vars.psi);
    let pv = g.value(vars.p);
    let pt = g.value(vars.p_tfa);
    let (b, d_phi, kh, kw) = (phi.dim(0), phi.dim(1), phi.dim(2), phi.dim(3));
    let d_psi = psi.dim(1);
    let k = kh * kw;
    (0..b)
        .map(|r| {
            let region = |t: &Tensor<T>, d: usize, j: usize| -> Vec<f64> { (0..d).map(|c| t.data()[r * d * k + c * k + j].as_f64()).collect() };
            AttentionMap {
                phi_f: (0..k).map(|j| region(phi, d_phi, j)).collect(),
                psi: (0..k).map(|j| region(psi, d_psi, j)).collect(),
                p: pv.data()[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect(),
                p_tfa: pt.data()[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect(),
                k_h: kh,
                k_w: kw,
            }
        })
        .collect()
}

impl AttentionMap {
    /// Region scores from explicit `p`, thresholded at `t`; features left empty.
    pub fn from_scores(p: Vec<f64>, k_h: usize, k_w: usize, t: f64) -> Result<Self> {
        if p.len() != k_h * k_w {
            bail!(Dimension, "{} scores for a {k_h}x{k_w} grid", p.len());
        }
        let p_tfa = p.iter().map(|&v| (v - t).max(0.0)).collect();
        Ok(Self { phi_f: vec![], psi: vec![], p, p_tfa, k_h, k_w })
    }

    pub fn k(&self) -> usize {
        self.k_h * self.k_w
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.p.iter().enumerate() {
            if v > self.p[best] {
                best = i;
            }
        }
        best
    }
}

/// `M = O ⊗ p_tfa` on an 8-bit frame, with nearest-neighbour upsampling of the grid.
pub fn mask(frame: &Frame, map: &AttentionMap) -> Result<Frame> {
    if map.k_h == 0 || map.k_w == 0 || frame.height % map.k_h != 0 || frame.width % map.k_w != 0 {
        bail!(Config, "{}x{} grid does not divide a {}x{} frame", map.k_h, map.k_w, frame.width, frame.height);
    }
    if map.p_tfa.len() != map.k() {
        bail!(Dimension, "{} scores for a {}x{} grid", map.p_tfa.len(), map.k_h, map.k_w);
    }
    let (bh, bw) = (frame.height / map.k_h, frame.width / map.k_w);
    let mut out = Frame::new(frame.width, frame.height, FrameKind::Masked);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let w = map.p_tfa[(y / bh) * map.k_w + x / bw];
            let src = frame.pixel(x, y);
            let px = if w == 1.0 { src } else { [0, 1, 2].map(|c| crate::sim::render::to_byte(src[c] as f64 / 255.0 * w)) };
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

/// `p_f = Σ_k p_tfa_k φ_f[k]` followed by the two heads of `net`.
pub fn pool_and_classify(map: &AttentionMap, net: &AttentionNet, store: &ParamStore<f64>) -> Result<PooledFeatures> {
    if map.phi_f.len() != map.k() {
        bail!(Dimension, "map carries {} region features for K = {}", map.phi_f.len(), map.k());
    }
    let d = map.phi_f.first().map(|r| r.len()).unwrap_or(0);
    let mut p_f = vec![0.0; d];
    for (w, phi) in map.p_tfa.iter().zip(&map.phi_f) {
        for (acc, v) in p_f.iter_mut().zip(phi) {
            *acc += w * v;
        }
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, d], p_f.clone()));
    let (s, c) = net.classify(&mut g, Bind::frozen(store), x);
    Ok(PooledFeatures { p_f, shape_logits: g.value(s).data().to_vec(), color_logits: g.value(c).data().to_vec() })
}

/// Sparsity plus classification loss for one frame's attention.
pub fn attention_loss(map: &AttentionMap, pooled: &PooledFeatures, task: &TaskSpec, lambda: f64) -> Result<f64> {
    if pooled.shape_logits.len() != task.n_shapes || pooled.color_logits.len() != task.n_colors {
        bail!(Dimension, "head widths do not match the task vocabulary");
    }
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[1, 1, map.k_h, map.k_w], map.p_tfa.clone()));
    let s = g.constant(Tensor::new(&[1, task.n_shapes], pooled.shape_logits.clone()));
    let c = g.constant(Tensor::new(&[1, task.n_colors], pooled.color_logits.clone()));
    let l = g_attention_loss(&mut g, p, s, c, &[task.shape], &[task.color], lambda);
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Action;

    fn frame() -> Frame {
        let data = (0..32 * 32 * 3).map(|i| (i * 7 % 251) as u8).collect();
        Frame::from_data(32, 32, FrameKind::Demo, data).unwrap()
    }

    #[test]
    fn threshold_cases() {
        let m = AttentionMap::from_scores(vec![0.5, 1.0, 0.2, 0.75], 2, 2, 0.5).unwrap();
        assert_eq!(m.p_tfa, vec![0.0, 0.5, 0.0, 0.25]);
    }

    #[test]
    fn mask_identity_and_zero() {
        let f = frame();
        let mut ones = AttentionMap::from_scores(vec![1.0; 64], 8, 8, 0.5).unwrap();
        ones.p_tfa = vec![1.0; 64];
        assert_eq!(mask(&f, &ones).unwrap().data, f.data);
        let zeros = AttentionMap::from_scores(vec![0.1; 64], 8, 8, 0.5).unwrap();
        assert!(mask(&f, &zeros).unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_region_block() {
        let f = Frame::from_data(32, 32, FrameKind::Demo, vec![200; 32 * 32 * 3]).unwrap();
        let mut m = AttentionMap::from_scores(vec![0.0; 16], 4, 4, 0.5).unwrap();
        m.p_tfa[6] = 1.0; // row 1, col 2 -> pixels y 8..16, x 16..24
        let out = mask(&f, &m).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (8..16).contains(&y) && (16..24).contains(&x);
                assert_eq!(out.pixel(x, y)[0] != 0, inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn indivisible_grid_rejected() {
        let m = AttentionMap::from_scores(vec![0.0; 9], 3, 3, 0.5).unwrap();
        assert!(matches!(mask(&frame(), &m), Err(crate::Error::Config(_))));
    }

    #[test]
    fn attention_loss_arithmetic() {
        let task = TaskSpec::new(Action::PickUp, 0, 0, 4, 3).unwrap();
        let mut m = AttentionMap::from_scores(vec![0.0; 4], 2, 2, 0.5).unwrap();
        let perfect = PooledFeatures { p_f: vec![], shape_logits: vec![60., -60., -60., -60.], color_logits: vec![60., -60., -60.] };
        assert!(attention_loss(&m, &perfect, &task, 1.0).unwrap() < 1e-12);
        m.p_tfa = vec![0.5; 4];
        let uniform = PooledFeatures { p_f: vec![], shape_logits: vec![0.0; 4], color_logits: vec![0.0; 3] };
        let v = attention_loss(&m, &uniform, &task, 1.0).unwrap();
        assert!((v - (0.5 + libm::log(4.0) + libm::log(3.0))).abs() < 1e-12);
    }
}
