//! One optimization step: discriminator update, then generator (and controller) update.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::ea::{g_attention_loss, pool};
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{g_loss_fake, g_loss_fea, g_loss_prior, g_loss_real, g_loss_rec, non_fake_rows, one_hot_rows, two_head_ce, LossBundle};
use crate::model::{Arch, Model};
use crate::motor::g_mdn_nll;
use crate::nets::{normal_tensor, object_tensor};
use crate::nn::{Adam, Bind};
use crate::real::Real;
use crate::task::TaskSpec;
use crate::tensor::Tensor;

/// Multipliers of the generator-side terms and the attention sparsity weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gd: f64,
    pub rec: f64,
    pub fea: f64,
    pub prior: f64,
    pub motor: f64,
    pub attention: f64,
    pub mrec: f64,
    pub sparsity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gd: 1.0, rec: 1.0, fea: 1.0, prior: 1.0, motor: 1.0, attention: 1.0, mrec: 1.0, sparsity: 1.0 }
    }
}

/// A clean frame block `[B, 3, H, W]` with its cluttered counterpart, one task per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBlock<T> {
    pub clean: Tensor<T>,
    pub cluttered: Option<Tensor<T>>,
    pub tasks: Vec<TaskSpec>,
}

/// Frames for one adversarial step. `demo` pairs `O_D` with `O_DA`, `synth` pairs `O_EA` with `O_EAC`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionBatch<T> {
    pub demo: Option<PairBlock<T>>,
    pub synth: Option<PairBlock<T>>,
    pub real_clutter: Option<Tensor<T>>,
    pub n_noise: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeqInput<T> {
    /// Per step `[B, 3, H, W]`, encoded on the fly.
    Frames(Vec<Tensor<T>>),
    /// Per step `[B, d_z]` cached codes.
    Latents(Vec<Tensor<T>>),
}

/// Teacher-forced controller sequences: per step `prev [B, J]`, `target [B, J]` and a row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch<T> {
    pub input: SeqInput<T>,
    pub tasks: Vec<TaskSpec>,
    pub prev: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
    pub mask: Vec<Vec<f64>>,
}

impl<T: Real> SeqBatch<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self, model: &Model<T>) -> Result<()> {
        let l = self.len();
        let steps = match &self.input {
            SeqInput::Frames(f) => f.len(),
            SeqInput::Latents(z) => z.len(),
        };
        if l == 0 || steps != l || self.prev.len() != l || self.mask.len() != l {
            bail!(Dimension, "sequence parts disagree: {steps} inputs, {} prev, {l} targets, {} masks", self.prev.len(), self.mask.len());
        }
        let b = self.tasks.len();
        let j = model.motor_cfg.joints;
        for t in 0..l {
            if self.prev[t].shape() != [b, j] || self.targets[t].shape() != [b, j] || self.mask[t].len() != b {
                bail!(Dimension, "sequence step {t} does not match batch {b} x {j}");
            }
        }
        if self.mask.iter().flatten().all(|&m| m == 0.0) {
            bail!(Input, "sequence batch is fully masked");
        }
        Ok(())
    }
}

/// Full task encodings `[B, |s|+|c|+actions]`.
pub fn task_tensor<T: Real>(tasks: &[TaskSpec]) -> Tensor<T> {
    let d = tasks.first().map(|t| t.encode().len()).unwrap_or(0);
    let data = tasks.iter().flat_map(|t| t.encode().values).map(T::lit).collect();
    Tensor::new(&[tasks.len(), d], data)
}

fn labels(tasks: &[TaskSpec]) -> (Vec<usize>, Vec<usize>) {
    (tasks.iter().map(|t| t.shape).collect(), tasks.iter().map(|t| t.color).collect())
}

fn add_opt<T: Real>(g: &mut Graph<T>, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => g.add(a, v),
        None => v,
    })
}

fn stack<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    Tensor::new(&shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// Encoder inputs of one block (clean rows first) and the shared clean target.
struct BlockInputs<T> {
    input: Tensor<T>,
    clean: Tensor<T>,
    tasks: Vec<TaskSpec>,
    kinds: usize,
}

fn block_inputs<T: Real>(model: &Model<T>, block: &PairBlock<T>, name: &str) -> Result<BlockInputs<T>> {
    let b = block.tasks.len();
    let res = model.vision.resolution;
    if b == 0 || block.clean.shape() != [b, 3, res, res] {
        bail!(Dimension, "{name} block has shape {:?} for {b} tasks", block.clean.shape());
    }
    if model.arch == Arch::Baseline {
        return Ok(BlockInputs { input: block.clean.clone(), clean: block.clean.clone(), tasks: block.tasks.clone(), kinds: 1 });
    }
    let Some(cl) = &block.cluttered else {
        bail!(Pairing, "{name} block has no cluttered counterpart");
    };
    if cl.shape() != block.clean.shape() {
        bail!(Pairing, "{name} cluttered frames {:?} vs clean {:?}", cl.shape(), block.clean.shape());
    }
    let mut tasks = block.tasks.clone();
    tasks.extend_from_slice(&block.tasks);
    Ok(BlockInputs { input: stack(&[&block.clean, cl]), clean: block.clean.clone(), tasks, kinds: 2 })
}

fn batch_blocks<T: Real>(model: &Model<T>, batch: &VisionBatch<T>) -> Result<Vec<BlockInputs<T>>> {
    let mut out = Vec::new();
    if let Some(d) = &batch.demo {
        out.push(block_inputs(model, d, "demo")?);
    }
    if model.arch != Arch::Baseline {
        if let Some(s) = &batch.synth {
            out.push(block_inputs(model, s, "synthetic")?);
        }
    }
    if out.is_empty() {
        bail!(Pairing, "vision batch has no frame pairs");
    }
    Ok(out)
}

/// Discriminator terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscTerms {
    pub l_real: f64,
    pub l_fake: f64,
    pub l_noise: f64,
    pub l_d: f64,
}

/// Builds `l_d = l_real + l_fake + l_noise` with trainable discriminator and frozen encoder/generator.
pub fn disc_graph<T: Real, R: Rng>(model: &Model<T>, batch: &VisionBatch<T>, rng: &mut R) -> Result<(Graph<T>, Var, DiscTerms)> {
    let blocks = batch_blocks(model, batch)?;
    let mut g = Graph::new();
    let frozen = Bind::frozen(&model.store);
    let train = Bind::train(&model.store);
    let (ns, nc) = (model.vision.n_shapes + 1, model.vision.n_colors + 1);

    // real frames: clean targets with labels, real clutter with a uniform non-fake target
    let mut real_frames: Vec<&Tensor<T>> = Vec::new();
    let mut real_tasks = Vec::new();
    if let Some(d) = &batch.demo {
        real_frames.push(&d.clean);
        real_tasks.extend_from_slice(&d.tasks);
    }
    if model.arch != Arch::Baseline {
        if let Some(s) = &batch.synth {
            real_frames.push(&s.clean);
            real_tasks.extend_from_slice(&s.tasks);
        }
    }
    let (shapes, colors) = labels(&real_tasks);
    let mut shape_t = one_hot_rows::<T>(&shapes, ns);
    let mut color_t = one_hot_rows::<T>(&colors, nc);
    let rc = if model.arch == Arch::Baseline { None } else { batch.real_clutter.as_ref() };
    if let Some(rc) = rc {
        real_frames.push(rc);
        shape_t = stack(&[&shape_t, &non_fake_rows(rc.dim(0), ns)]);
        color_t = stack(&[&color_t, &non_fake_rows(rc.dim(0), nc)]);
    }
    let x_real = g.constant(stack(&real_frames));
    let d_real = model.discriminator.forward(&mut g, train, x_real);
    let l_real = two_head_ce(&mut g, d_real.shape_logits, d_real.color_logits, shape_t, color_t);

    // reconstructions from a frozen encoder/generator pass
    let mut fakes = Vec::new();
    for b in &blocks {
        let x = g.constant(b.input.clone());
        let o = g.constant(object_tensor(&b.tasks));
        let noise = normal_tensor(rng, &[b.tasks.len(), model.vision.d_z]);
        let e = model.encode(&mut g, frozen, x, o, Some(noise));
        let (rec, _) = model.generate(&mut g, frozen, e.latent.z);
        fakes.push(g.detach(rec));
    }
    let x_fake = if fakes.len() == 1 { fakes[0] } else { g.concat(&fakes, 0) };
    let d_fake = model.discriminator.forward(&mut g, train, x_fake);
    let l_fake = g_loss_fake(&mut g, d_fake.shape_logits, d_fake.color_logits);

    let mut l_d = g.add(l_real, l_fake);
    let mut l_noise_v = None;
    if batch.n_noise > 0 {
        let z = g.constant(normal_tensor(rng, &[batch.n_noise, model.vision.d_z]));
        let (gen, _) = model.generate(&mut g, frozen, z);
        let gen = g.detach(gen);
        let d_noise = model.discriminator.forward(&mut g, train, gen);
        let l_noise = g_loss_fake(&mut g, d_noise.shape_logits, d_noise.color_logits);
        l_d = g.add(l_d, l_noise);
        l_noise_v = Some(l_noise);
    }
    let terms = DiscTerms {
        l_real: g.scalar(l_real).as_f64(),
        l_fake: g.scalar(l_fake).as_f64(),
        l_noise: l_noise_v.map(|v| g.scalar(v).as_f64()).unwrap_or(0.0),
        l_d: g.scalar(l_d).as_f64(),
    };
    Ok((g, l_d, terms))
}

/// Generator-side terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenTerms {
    pub l_gd: f64,
    pub l_rec: f64,
    pub l_fea: f64,
    pub l_prior: f64,
    pub l_motor: f64,
    pub l_a: Option<f64>,
    pub l_mrec: Option<f64>,
    pub l_g: f64,
    /// Mean attention score over all regions, for the running threshold.
    pub mean_p: Option<f64>,
}

/// Sum over masked steps of the mixture NLL divided by the mask total.
fn motor_loss<T: Real>(model: &Model<T>, g: &mut Graph<T>, seq: &SeqBatch<T>, train_vision: bool) -> Result<Var> {
    seq.validate(model)?;
    let p = Bind::train(&model.store);
    let pv = if train_vision { p } else { Bind::frozen(&model.store) };
    let b = seq.tasks.len();
    let task = g.constant(task_tensor(&seq.tasks));
    if g.shape(task)[1] != model.motor_cfg.task_dim {
        bail!(Dimension, "task encoding of {} for a controller expecting {}", g.shape(task)[1], model.motor_cfg.task_dim);
    }
    let objects = g.constant(object_tensor(&seq.tasks));
    let mut state = model.controller.zero_state(g, b);
    let mut acc: Option<Var> = None;
    let total: f64 = seq.mask.iter().flatten().sum();
    for t in 0..seq.len() {
        let latent = match &seq.input {
            SeqInput::Frames(f) => {
                let x = g.constant(f[t].clone());
                model.encode(g, pv, x, objects, None).latent.mu
            }
            SeqInput::Latents(z) => {
                if z[t].shape() != [b, model.vision.d_z] {
                    bail!(Dimension, "cached latents {:?} for batch {b}", z[t].shape());
                }
                g.constant(z[t].clone())
            }
        };
        let prev = g.constant(seq.prev[t].clone());
        let (mix, next) = model.controller.step(g, p, latent, task, prev, &state, false);
        state = next;
        if seq.mask[t].iter().any(|&m| m != 0.0) {
            let (s, _) = g_mdn_nll(g, &mix, &seq.targets[t], &seq.mask[t]);
            acc = add_opt(g, acc, s);
        }
    }
    let sum = acc.expect("validated mask has an active row");
    Ok(g.scale(sum, T::lit(1.0 / total)))
}

/// Builds `l_g` with trainable encoder, generator, attention and controller and a frozen discriminator.
pub fn gen_graph<T: Real, R: Rng>(model: &Model<T>, batch: &VisionBatch<T>, seq: Option<&SeqBatch<T>>, w: &LossWeights, rng: &mut R) -> Result<(Graph<T>, Var, GenTerms)> {
    let blocks = batch_blocks(model, batch)?;
    let mut g = Graph::new();
    let train = Bind::train(&model.store);
    let frozen = Bind::frozen(&model.store);

    let (mut gd, mut rec_pairs, mut fea_pairs, mut prior, mut att, mut mrec_pairs) = (None, Vec::new(), Vec::new(), None, None, Vec::new());
    let mut p_sum = 0.0;
    let mut p_count = 0usize;
    for b in &blocks {
        let rows = b.tasks.len();
        let per = rows / b.kinds;
        let x = g.constant(b.input.clone());
        let o = g.constant(object_tensor(&b.tasks));
        let noise = normal_tensor(rng, &[rows, model.vision.d_z]);
        let e = model.encode(&mut g, train, x, o, Some(noise));
        let (rec, mrec) = model.generate(&mut g, train, e.latent.z);

        let (shapes, colors) = labels(&b.tasks);
        let d_rec = model.discriminator.forward(&mut g, frozen, rec);
        let l = g_loss_real(&mut g, d_rec.shape_logits, d_rec.color_logits, &shapes, &colors);
        let l = g.scale(l, T::lit(rows as f64));
        gd = add_opt(&mut g, gd, l);

        let target = g.constant(b.clean.clone());
        let d_target = model.discriminator.forward(&mut g, frozen, target);
        for k in 0..b.kinds {
            let r = g.slice(rec, 0, k * per, per);
            rec_pairs.push((r, target));
            let f = g.slice(d_rec.features, 0, k * per, per);
            fea_pairs.push((f, d_target.features));
        }

        let kl = g_loss_prior(&mut g, e.latent.mu, e.latent.ln_sigma);
        let kl = g.scale(kl, T::lit(rows as f64));
        prior = add_opt(&mut g, prior, kl);

        if let (Some(net), Some(a), Some(m), Some(mr)) = (&model.attention, e.attention, e.masked, mrec) {
            let pooled = pool(&mut g, a.phi, a.p_tfa);
            let (s, c) = net.classify(&mut g, train, pooled);
            let la = g_attention_loss(&mut g, a.p_tfa, s, c, &shapes, &colors, w.sparsity);
            let la = g.scale(la, T::lit(rows as f64));
            att = add_opt(&mut g, att, la);
            for k in 0..b.kinds {
                let r = g.slice(mr, 0, k * per, per);
                let t = g.slice(m, 0, k * per, per);
                mrec_pairs.push((r, t));
            }
            let pv = g.value(a.p);
            p_sum += pv.data().iter().map(|v| v.as_f64()).sum::<f64>();
            p_count += pv.len();
        }
    }
    let total_rows: usize = blocks.iter().map(|b| b.tasks.len()).sum();
    let inv = T::lit(1.0 / total_rows as f64);
    let l_gd = g.scale(gd.unwrap(), inv);
    let l_prior = g.scale(prior.unwrap(), inv);
    let l_rec = g_loss_rec(&mut g, &rec_pairs);
    let l_fea = g_loss_fea(&mut g, &fea_pairs);
    let l_a = att.map(|a| g.scale(a, inv));
    let l_mrec = (!mrec_pairs.is_empty()).then(|| g_loss_rec(&mut g, &mrec_pairs));
    let l_motor = match seq {
        Some(s) => Some(motor_loss(model, &mut g, s, true)?),
        None => None,
    };

    let mut terms: Vec<(Var, f64)> = vec![(l_gd, w.gd), (l_rec, w.rec), (l_fea, w.fea), (l_prior, w.prior)];
    if let Some(m) = l_motor {
        terms.push((m, w.motor));
    }
    if let Some(a) = l_a {
        terms.push((a, w.attention));
    }
    if let Some(m) = l_mrec {
        terms.push((m, w.mrec));
    }
    let mut l_g = None;
    for (v, k) in terms {
        let s = g.scale(v, T::lit(k));
        l_g = add_opt(&mut g, l_g, s);
    }
    let l_g = l_g.unwrap();
    let read = |g: &Graph<T>, v: Var| g.scalar(v).as_f64();
    let out = GenTerms {
        l_gd: read(&g, l_gd),
        l_rec: read(&g, l_rec),
        l_fea: read(&g, l_fea),
        l_prior: read(&g, l_prior),
        l_motor: l_motor.map(|v| read(&g, v)).unwrap_or(0.0),
        l_a: l_a.map(|v| read(&g, v)),
        l_mrec: l_mrec.map(|v| read(&g, v)),
        l_g: read(&g, l_g),
        mean_p: (p_count > 0).then(|| p_sum / p_count as f64),
    };
    Ok((g, l_g, out))
}

/// Controller-only NLL on cached latents; vision parameters never enter the graph.
pub fn motor_graph<T: Real>(model: &Model<T>, seq: &SeqBatch<T>) -> Result<(Graph<T>, Var)> {
    if !matches!(seq.input, SeqInput::Latents(_)) {
        bail!(Config, "controller fine-tuning expects cached latents");
    }
    let mut g = Graph::new();
    let l = motor_loss(model, &mut g, seq, false)?;
    Ok((g, l))
}

/// Optimizer state of a full training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers<T> {
    pub disc: Adam<T>,
    pub gen: Adam<T>,
    pub motor: Adam<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(model: &Model<T>, lr_d: f64, lr_g: f64, lr_motor: f64) -> Result<Self> {
        if !(lr_d > 0.0 && lr_g > 0.0 && lr_motor > 0.0) {
            return Err(Error::Config(alloc::format!("learning rates must be positive: {lr_d}, {lr_g}, {lr_motor}")));
        }
        Ok(Self {
            disc: Adam::new(&model.store, model.disc_ids(), lr_d),
            gen: Adam::new(&model.store, model.gen_ids(), lr_g),
            motor: Adam::new(&model.store, model.motor_ids(), lr_motor),
        })
    }
}

/// Moves the attention threshold toward the batch mean score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningThreshold {
    pub momentum: f64,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        bail!(Input, "{name} is {v}");
    }
    Ok(())
}

/// One joint step: a discriminator update on `l_d`, then an encoder/generator/controller update on
/// `l_g` against the updated, frozen discriminator.
pub fn train_step<T: Real, R: Rng>(
    model: &mut Model<T>,
    opt: &mut Optimizers<T>,
    batch: &VisionBatch<T>,
    seq: Option<&SeqBatch<T>>,
    w: &LossWeights,
    threshold: Option<RunningThreshold>,
    rng: &mut R,
) -> Result<LossBundle> {
    let (g, l_d, d) = disc_graph(model, batch, rng)?;
    check_finite("l_d", d.l_d)?;
    let grads = g.backward(l_d).for_params(&g, &model.store);
    drop(g);
    opt.disc.apply(&mut model.store, &grads);

    let (g, l_g, t) = gen_graph(model, batch, seq, w, rng)?;
    check_finite("l_g", t.l_g)?;
    let grads = g.backward(l_g).for_params(&g, &model.store);
    drop(g);
    opt.gen.apply(&mut model.store, &grads);
    if seq.is_some() {
        opt.motor.apply(&mut model.store, &grads);
    }
    if let (Some(rt), Some(mean_p), Some(att)) = (threshold, t.mean_p, model.attention.as_mut()) {
        att.threshold = rt.momentum * att.threshold + (1.0 - rt.momentum) * mean_p;
    }
    let bundle = LossBundle {
        l_real: d.l_real,
        l_fake: d.l_fake,
        l_noise: d.l_noise,
        l_d: d.l_d,
        l_gd: t.l_gd,
        l_rec: t.l_rec,
        l_fea: t.l_fea,
        l_prior: t.l_prior,
        l_motor: t.l_motor,
        l_a: t.l_a,
        l_mrec: t.l_mrec,
        l_g: t.l_g,
    };
    Ok(bundle)
}

/// One controller update on cached latents; returns the masked mean NLL.
pub fn motor_step<T: Real>(model: &mut Model<T>, opt: &mut Adam<T>, seq: &SeqBatch<T>) -> Result<f64> {
    let (g, l) = motor_graph(model, seq)?;
    let v = g.scalar(l).as_f64();
    check_finite("l_motor", v)?;
    let grads = g.backward(l).for_params(&g, &model.store);
    drop(g);
    opt.apply(&mut model.store, &grads);
    Ok(v)
}

/// Masked mean NLL without updating anything.
pub fn motor_loss_value<T: Real>(model: &Model<T>, seq: &SeqBatch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let l = motor_loss(model, &mut g, seq, false)?;
    Ok(g.scalar(l).as_f64())
}
