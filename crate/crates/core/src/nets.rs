//! Convolutional encoder, deconvolutional generator and classifier-discriminator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::losses::{g_ln_sigma, DiscOutput};
use crate::nn::{Bind, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sizes shared by the vision networks.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    pub resolution: usize,
    /// Output channels of the four stride-2 conv blocks.
    pub channels: [usize; 4],
    pub d_z: usize,
    pub d_f: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    /// Channels of the tiled task features in the conditioned encoder.
    pub task_channels: usize,
    /// Number of conv blocks before the task features are concatenated.
    pub fusion_block: usize,
    /// Attention grid side; `K = grid²`.
    pub grid: usize,
    pub attention_channels: Vec<usize>,
    pub d_phi: usize,
    pub d_psi: usize,
    pub head_hidden: usize,
    pub threshold: f64,
    pub leak: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: [16, 32, 64, 64],
            d_z: 64,
            d_f: 128,
            n_shapes: 4,
            n_colors: 3,
            task_channels: 8,
            fusion_block: 2,
            grid: 8,
            attention_channels: vec![16, 32],
            d_phi: 32,
            d_psi: 32,
            head_hidden: 32,
            threshold: 0.5,
            leak: 0.2,
        }
    }
}

impl VisionConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            resolution: 16,
            channels: [2, 2, 3, 3],
            d_z: 3,
            d_f: 4,
            n_shapes: 2,
            n_colors: 2,
            task_channels: 2,
            fusion_block: 2,
            grid: 4,
            attention_channels: vec![2],
            d_phi: 3,
            d_psi: 3,
            head_hidden: 3,
            threshold: 0.5,
            leak: 0.2,
        }
    }

    pub fn object_dim(&self) -> usize {
        self.n_shapes + self.n_colors
    }

    pub fn final_side(&self) -> usize {
        self.resolution >> 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 16 != 0 || self.resolution == 0 {
            bail!(Config, "resolution {} must be a positive multiple of 16", self.resolution);
        }
        if self.fusion_block > 4 {
            bail!(Config, "fusion block {} past the last conv block", self.fusion_block);
        }
        if self.grid == 0 || self.resolution % self.grid != 0 {
            bail!(Config, "attention grid {} does not divide resolution {}", self.grid, self.resolution);
        }
        let factor = self.resolution / self.grid;
        if !factor.is_power_of_two() || factor.trailing_zeros() as usize != self.attention_channels.len() + 1 {
            bail!(Config, "attention trunk of {} blocks cannot reduce {} to a {} grid", self.attention_channels.len() + 1, self.resolution, self.grid);
        }
        if !(0.0..1.0).contains(&self.threshold) {
            bail!(Config, "threshold {} outside [0, 1)", self.threshold);
        }
        Ok(())
    }
}

/// `(μ, σ)` of the latent Gaussian and one reparameterized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

/// Latent code of a batch as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub ln_sigma: Var,
    pub z: Var,
}

impl LatentVars {
    /// Per-row codes read back from the graph.
    pub fn codes<T: Real>(&self, g: &Graph<T>) -> Vec<LatentCode> {
        let mu = g.value(self.mu);
        let ls = g.value(self.ln_sigma);
        let z = g.value(self.z);
        let d = mu.dim(1);
        (0..mu.dim(0))
            .map(|r| LatentCode {
                mu: mu.data()[r * d..(r + 1) * d].iter().map(|v| v.as_f64()).collect(),
                sigma: ls.data()[r * d..(r + 1) * d].iter().map(|v| libm::exp(v.as_f64())).collect(),
                z: z.data()[r * d..(r + 1) * d].iter().map(|v| v.as_f64()).collect(),
            })
            .collect()
    }
}

/// Standard-normal noise tensor.
pub fn normal_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect();
    Tensor::new(shape, data)
}

/// `z = μ + σ ⊙ ε`; with `noise = None` the sample is the mean.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, ln_sigma: Var, noise: Option<Tensor<T>>) -> Var {
    match noise {
        None => mu,
        Some(eps) => {
            let sigma = g.exp(ln_sigma);
            let e = g.constant(eps);
            let s = g.mul(sigma, e);
            g.add(mu, s)
        }
    }
}

fn leaky<T: Real>(g: &mut Graph<T>, x: Var, leak: f64) -> Var {
    g.leaky_relu(x, T::lit(leak))
}

/// Four stride-2 conv blocks, optional tiled task fusion, then a linear map to `(μ, ln σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub fuse: Option<Linear>,
    pub fusion_block: usize,
    pub fc: Linear,
    pub d_z: usize,
    pub leak: f64,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &VisionConfig, conditioned: bool) -> Self {
        let fuse = conditioned.then(|| Linear::new(store, rng, &format!("{name}.fuse"), cfg.object_dim(), cfg.task_channels));
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in cfg.channels.iter().enumerate() {
            if conditioned && i == cfg.fusion_block {
                in_ch += cfg.task_channels;
            }
            convs.push(Conv2d::new(store, rng, &format!("{name}.conv{i}"), in_ch, out, 4, 2, 1));
            in_ch = out;
        }
        let side = cfg.final_side();
        let fc = Linear::new(store, rng, &format!("{name}.fc"), in_ch * side * side, 2 * cfg.d_z);
        Self { convs, fuse, fusion_block: cfg.fusion_block, fc, d_z: cfg.d_z, leak: cfg.leak }
    }

    pub fn is_conditioned(&self) -> bool {
        self.fuse.is_some()
    }

    /// `x[B, 3, H, W]` and, when conditioned, `task[B, |s|+|c|]`; returns `(μ, ln σ)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var, task: Option<Var>) -> (Var, Var) {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i == self.fusion_block {
                if let (Some(fuse), Some(t)) = (&self.fuse, task) {
                    let s = g.shape(h).to_vec();
                    let e = fuse.forward(g, p, t);
                    let e = leaky(g, e, self.leak);
                    let tiled = g.tile_spatial(e, s[2], s[3]);
                    h = g.concat(&[h, tiled], 1);
                }
            }
            let y = conv.forward(g, p, h);
            h = leaky(g, y, self.leak);
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        let out = self.fc.forward(g, p, flat);
        let mu = g.slice(out, 1, 0, self.d_z);
        let raw = g.slice(out, 1, self.d_z, self.d_z);
        (mu, g_ln_sigma(g, raw))
    }

    /// Forward plus reparameterized sample.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var, task: Option<Var>, noise: Option<Tensor<T>>) -> LatentVars {
        let (mu, ln_sigma) = self.forward(g, p, x, task);
        let z = reparameterize(g, mu, ln_sigma, noise);
        LatentVars { mu, ln_sigma, z }
    }
}

/// Linear map from `z`, then four stride-2 transposed convs and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub fc: Linear,
    pub deconvs: Vec<ConvTranspose2d>,
    pub start_ch: usize,
    pub side: usize,
    pub out_ch: usize,
    pub leak: f64,
}

impl Generator {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &VisionConfig, out_ch: usize) -> Self {
        let side = cfg.final_side();
        let start_ch = cfg.channels[3];
        let fc = Linear::new(store, rng, &format!("{name}.fc"), cfg.d_z, start_ch * side * side);
        let chans = [cfg.channels[3], cfg.channels[2], cfg.channels[1], cfg.channels[0], out_ch];
        let deconvs = (0..4).map(|i| ConvTranspose2d::new(store, rng, &format!("{name}.deconv{i}"), chans[i], chans[i + 1], 4, 2, 1)).collect();
        Self { fc, deconvs, start_ch, side, out_ch, leak: cfg.leak }
    }

    /// `z[B, d_z] -> [B, out_ch, H, W]` in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, z: Var) -> Var {
        let b = g.shape(z)[0];
        let h = self.fc.forward(g, p, z);
        let h = leaky(g, h, self.leak);
        let mut h = g.reshape(h, &[b, self.start_ch, self.side, self.side]);
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            let y = d.forward(g, p, h);
            h = if i == last { g.sigmoid(y) } else { leaky(g, y, self.leak) };
        }
        h
    }
}

/// Discriminator outputs of a batch as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct DiscVars {
    pub shape_logits: Var,
    pub color_logits: Var,
    pub features: Var,
}

impl DiscVars {
    pub fn outputs<T: Real>(&self, g: &Graph<T>) -> Vec<DiscOutput> {
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            let d = t.dim(1);
            t.data().chunks(d).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
        };
        let (s, c, f) = (rows(self.shape_logits), rows(self.color_logits), rows(self.features));
        s.into_iter().zip(c).zip(f).map(|((shape_logits, color_logits), features)| DiscOutput { shape_logits, color_logits, features }).collect()
    }
}

/// Conv trunk, a `d_f` feature layer, and shape/color heads with an extra fake class each.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub shape_head: Linear,
    pub color_head: Linear,
    pub leak: f64,
}

impl Discriminator {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &VisionConfig) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(store, rng, &format!("{name}.conv{i}"), in_ch, out, 4, 2, 1));
            in_ch = out;
        }
        let side = cfg.final_side();
        let fc = Linear::new(store, rng, &format!("{name}.fc"), in_ch * side * side, cfg.d_f);
        let shape_head = Linear::new(store, rng, &format!("{name}.shape"), cfg.d_f, cfg.n_shapes + 1);
        let color_head = Linear::new(store, rng, &format!("{name}.color"), cfg.d_f, cfg.n_colors + 1);
        Self { convs, fc, shape_head, color_head, leak: cfg.leak }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, x: Var) -> DiscVars {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, p, h);
            h = leaky(g, y, self.leak);
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        let f = self.fc.forward(g, p, flat);
        let features = leaky(g, f, self.leak);
        let shape_logits = self.shape_head.forward(g, p, features);
        let color_logits = self.color_head.forward(g, p, features);
        DiscVars { shape_logits, color_logits, features }
    }
}

/// Stacks CHW frames into a `[B, 3, H, W]` tensor, checking the resolution.
pub fn frames_tensor<T: Real>(frames: &[&crate::sim::Frame], resolution: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(frames.len() * 3 * resolution * resolution);
    for f in frames {
        if f.width != resolution || f.height != resolution {
            bail!(Dimension, "{}x{} frame for a {resolution} network", f.width, f.height);
        }
        data.extend(f.to_chw::<T>());
    }
    Ok(Tensor::new(&[frames.len(), 3, resolution, resolution], data))
}

/// Rows of one-hot object encodings `[B, |s|+|c|]`.
pub fn object_tensor<T: Real>(tasks: &[crate::task::TaskSpec]) -> Tensor<T> {
    let d = tasks.first().map(|t| t.n_shapes + t.n_colors).unwrap_or(0);
    let mut data = Vec::with_capacity(tasks.len() * d);
    for t in tasks {
        data.extend(t.object_encoding().into_iter().map(T::lit));
    }
    Tensor::new(&[tasks.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_line_up() {
        let cfg = VisionConfig::default();
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &cfg, true);
        let gen = Generator::new(&mut store, &mut rng, "gen", &cfg, 3);
        let disc = Discriminator::new(&mut store, &mut rng, "disc", &cfg);
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut rng, &[2, 3, 64, 64]).map(|v: f32| v.abs().min(1.0)));
        let t = g.constant(Tensor::from_f64(&[2, 7], &[1., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0., 1., 0., 0.]));
        let p = Bind::train(&store);
        let code = enc.encode(&mut g, p, x, Some(t), Some(normal_tensor(&mut rng, &[2, 64])));
        assert_eq!(g.shape(code.z), &[2, 64]);
        let o = gen.forward(&mut g, p, code.z);
        assert_eq!(g.shape(o), &[2, 3, 64, 64]);
        assert!(g.value(o).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let d = disc.forward(&mut g, p, o);
        assert_eq!(g.shape(d.shape_logits), &[2, 5]);
        assert_eq!(g.shape(d.color_logits), &[2, 4]);
        assert_eq!(g.shape(d.features), &[2, 128]);
    }

    #[test]
    fn task_conditioning_is_live() {
        let cfg = VisionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &cfg, true);
        let frame = normal_tensor::<f64, _>(&mut rng, &[1, 3, 16, 16]);
        let mu_for = |task: [f64; 4]| {
            let mut g = Graph::new();
            let x = g.constant(frame.clone());
            let t = g.constant(Tensor::from_f64(&[1, 4], &task));
            let (mu, _) = enc.forward(&mut g, Bind::frozen(&store), x, Some(t));
            g.value(mu).clone()
        };
        let a = mu_for([1., 0., 1., 0.]);
        let b = mu_for([0., 1., 1., 0.]);
        assert!(a.max_abs_diff(&b) > 0.0);
        assert_eq!(a, mu_for([1., 0., 1., 0.]));
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(VisionConfig { grid: 6, ..VisionConfig::default() }.validate().is_err());
        assert!(VisionConfig { attention_channels: vec![8], ..VisionConfig::default() }.validate().is_err());
    }
}
