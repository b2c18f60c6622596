//! Every loss term against a brute-force scalar oracle on random inputs, and the composed training
//! bundles against the sum of independently recomputed terms.
#![allow(dead_code)]

use asor_core::ea::{attention_loss, read_maps, AttentionMap, PooledFeatures};
use asor_core::graph::Graph;
use asor_core::losses::{loss_fake, loss_fea, loss_gadv, loss_noise, loss_prior, loss_real, loss_rec, DiscOutput};
use asor_core::model::{Arch, Model};
use asor_core::motor::{mdn_nll, MixtureParams, MotorConfig};
use asor_core::nets::{normal_tensor, object_tensor, VisionConfig};
use asor_core::nn::Bind;
use asor_core::task::{Action, TaskSpec};
use asor_core::tensor::Tensor;
use asor_core::train::{disc_graph, gen_graph, task_tensor, LossWeights, PairBlock, SeqBatch, SeqInput, VisionBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DRAWS: usize = 1000;
pub const TOL: f64 = 1e-6;
pub const TOL_BUNDLE: f64 = 1e-5;
const N_SHAPES: usize = 4;
const N_COLORS: usize = 3;

/// `-ln(e^{l_y} / Σ e^{l})` without log-sum-exp.
pub fn ce_oracle(logits: &[f64], y: usize) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[y].exp() / z).ln()
}

/// Cross-entropy against a soft target.
pub fn soft_ce_oracle(logits: &[f64], target: &[f64]) -> f64 {
    target.iter().enumerate().map(|(c, &w)| if w == 0.0 { 0.0 } else { w * ce_oracle(logits, c) }).sum()
}

pub fn gaussian(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `-ln Σ_i α_i Π_j N(t_j; μ_ij, σ_ij)` by direct summation of densities.
pub fn mdn_oracle(p: &MixtureParams, t: &[f64]) -> f64 {
    let density: f64 = p.alpha.iter().enumerate().map(|(i, a)| a * t.iter().enumerate().map(|(j, &x)| gaussian(x, p.mu[i][j], p.sigma[i][j])).product::<f64>()).sum();
    -density.ln()
}

pub fn kl_oracle(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter().zip(sigma).map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln())).sum()
}

fn vec_of(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_task(rng: &mut ChaCha8Rng, n_s: usize, n_c: usize) -> TaskSpec {
    let a = if rng.gen_bool(0.5) { Action::PickUp } else { Action::PushRight };
    TaskSpec::new(a, rng.gen_range(0..n_s), rng.gen_range(0..n_c), n_s, n_c).unwrap()
}

fn random_disc(rng: &mut ChaCha8Rng) -> DiscOutput {
    DiscOutput { shape_logits: vec_of(rng, N_SHAPES + 1, -6.0, 6.0), color_logits: vec_of(rng, N_COLORS + 1, -6.0, 6.0), features: vec![] }
}

/// Worst absolute error of `f` over `DRAWS` random inputs.
fn worst(seed: u64, mut f: impl FnMut(&mut ChaCha8Rng) -> (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..DRAWS).map(|_| f(&mut rng)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `(name, worst abs error)` for every single-term loss.
pub fn term_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push((
        "loss_real",
        worst(1, |rng| {
            let (o, t) = (random_disc(rng), random_task(rng, N_SHAPES, N_COLORS));
            (loss_real(&o, &t).unwrap(), ce_oracle(&o.shape_logits, t.shape) + ce_oracle(&o.color_logits, t.color))
        }),
    ));
    out.push((
        "loss_fake",
        worst(2, |rng| {
            let o = random_disc(rng);
            (loss_fake(&o).unwrap(), ce_oracle(&o.shape_logits, N_SHAPES) + ce_oracle(&o.color_logits, N_COLORS))
        }),
    ));
    out.push((
        "loss_noise",
        worst(3, |rng| {
            let o = random_disc(rng);
            (loss_noise(&o).unwrap(), ce_oracle(&o.shape_logits, N_SHAPES) + ce_oracle(&o.color_logits, N_COLORS))
        }),
    ));
    out.push((
        "loss_gadv",
        worst(4, |rng| {
            let (o, t) = (random_disc(rng), random_task(rng, N_SHAPES, N_COLORS));
            (loss_gadv(&o, &t).unwrap(), ce_oracle(&o.shape_logits, t.shape) + ce_oracle(&o.color_logits, t.color))
        }),
    ));
    out.push((
        "loss_rec",
        worst(5, |rng| {
            let n = rng.gen_range(1..300);
            let recs: Vec<Vec<f64>> = (0..4).map(|_| vec_of(rng, n, 0.0, 1.0)).collect();
            let tgts: Vec<Vec<f64>> = (0..4).map(|_| vec_of(rng, n, 0.0, 1.0)).collect();
            let oracle: f64 = recs.iter().zip(&tgts).map(|(r, t)| r.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64).sum();
            let r: Vec<&[f64]> = recs.iter().map(|v| v.as_slice()).collect();
            let t: Vec<&[f64]> = tgts.iter().map(|v| v.as_slice()).collect();
            (loss_rec(&r, &t).unwrap(), oracle)
        }),
    ));
    out.push((
        "loss_fea",
        worst(6, |rng| {
            let n = rng.gen_range(1..130);
            let recs: Vec<Vec<f64>> = (0..4).map(|_| vec_of(rng, n, -2.0, 2.0)).collect();
            let tgts: Vec<Vec<f64>> = (0..4).map(|_| vec_of(rng, n, -2.0, 2.0)).collect();
            let oracle: f64 = recs.iter().zip(&tgts).map(|(r, t)| r.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum();
            let r: Vec<&[f64]> = recs.iter().map(|v| v.as_slice()).collect();
            let t: Vec<&[f64]> = tgts.iter().map(|v| v.as_slice()).collect();
            (loss_fea(&r, &t).unwrap(), oracle)
        }),
    ));
    out.push((
        "loss_prior",
        worst(7, |rng| {
            let d = rng.gen_range(1..80);
            let mu = vec_of(rng, d, -2.0, 2.0);
            let sigma = vec_of(rng, d, 0.05, 3.0);
            (loss_prior(&mu, &sigma).unwrap(), kl_oracle(&mu, &sigma))
        }),
    ));
    out.push((
        "attention_loss",
        worst(8, |rng| {
            let (kh, kw) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let map = AttentionMap::from_scores(vec_of(rng, kh * kw, 0.0, 1.0), kh, kw, 0.5).unwrap();
            let pooled = PooledFeatures { p_f: vec![], shape_logits: vec_of(rng, N_SHAPES, -5.0, 5.0), color_logits: vec_of(rng, N_COLORS, -5.0, 5.0) };
            let t = random_task(rng, N_SHAPES, N_COLORS);
            let lambda = rng.gen_range(0.0..2.0);
            let sparse = lambda * map.p_tfa.iter().map(|v| v.abs()).sum::<f64>() / (kh * kw) as f64;
            let oracle = sparse + ce_oracle(&pooled.shape_logits, t.shape) + ce_oracle(&pooled.color_logits, t.color);
            (attention_loss(&map, &pooled, &t, lambda).unwrap(), oracle)
        }),
    ));
    out.push((
        "mdn_nll",
        worst(9, |rng| {
            let (n, j) = (3, 7);
            let w = vec_of(rng, n, 0.05, 1.0);
            let s: f64 = w.iter().sum();
            let p = MixtureParams {
                alpha: w.iter().map(|v| v / s).collect(),
                mu: (0..n).map(|_| vec_of(rng, j, -1.0, 1.0)).collect(),
                sigma: (0..n).map(|_| vec_of(rng, j, 0.2, 1.5)).collect(),
            };
            let t = vec_of(rng, j, -1.5, 1.5);
            (mdn_nll(&p, &t).unwrap(), mdn_oracle(&p, &t))
        }),
    ));
    out
}

/// Toy configuration shared by the bundle oracles.
pub fn toy_vision() -> VisionConfig {
    VisionConfig { n_shapes: N_SHAPES, n_colors: N_COLORS, ..VisionConfig::toy() }
}

pub fn toy_motor() -> MotorConfig {
    MotorConfig { d_z: 3, task_dim: N_SHAPES + N_COLORS + 2, joints: 3, hidden: 3, layers: 3, components: 2 }
}

fn frames(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Tensor<f64> {
    Tensor::new(&[n, 3, res, res], vec_of(rng, n * 3 * res * res, 0.0, 1.0))
}

pub fn random_batch(rng: &mut ChaCha8Rng, b: usize) -> VisionBatch<f64> {
    let res = toy_vision().resolution;
    let block = |rng: &mut ChaCha8Rng| PairBlock {
        clean: frames(rng, b, res),
        cluttered: Some(frames(rng, b, res)),
        tasks: (0..b).map(|_| random_task(rng, N_SHAPES, N_COLORS)).collect(),
    };
    let demo = block(rng);
    let synth = block(rng);
    let n_rc = rng.gen_range(1..3);
    VisionBatch { demo: Some(demo), synth: Some(synth), real_clutter: Some(frames(rng, n_rc, res)), n_noise: rng.gen_range(0..3) }
}

pub fn random_seq(rng: &mut ChaCha8Rng, b: usize, l: usize) -> SeqBatch<f64> {
    let res = toy_vision().resolution;
    let j = toy_motor().joints;
    let cmd = |rng: &mut ChaCha8Rng| Tensor::new(&[b, j], vec_of(rng, b * j, -0.5, 0.5));
    let mut mask: Vec<Vec<f64>> = (0..l).map(|_| (0..b).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect()).collect();
    mask[0][0] = 1.0;
    SeqBatch {
        input: SeqInput::Frames((0..l).map(|_| frames(rng, b, res)).collect()),
        tasks: (0..b).map(|_| random_task(rng, N_SHAPES, N_COLORS)).collect(),
        prev: (0..l).map(|_| cmd(rng)).collect(),
        targets: (0..l).map(|_| cmd(rng)).collect(),
        mask,
    }
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = t.len() / t.dim(0);
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}

fn stack(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    Tensor::new(&shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// Frames and tasks of each encoder block: clean rows then cluttered rows; clean only for the baseline.
fn blocks(model: &Model<f64>, batch: &VisionBatch<f64>) -> Vec<(Tensor<f64>, Tensor<f64>, Vec<TaskSpec>)> {
    let mut out = Vec::new();
    let mut parts = vec![batch.demo.as_ref().unwrap()];
    if model.arch != Arch::Baseline {
        parts.push(batch.synth.as_ref().unwrap());
    }
    for p in parts {
        if model.arch == Arch::Baseline {
            out.push((p.clean.clone(), p.clean.clone(), p.tasks.clone()));
        } else {
            let mut tasks = p.tasks.clone();
            tasks.extend_from_slice(&p.tasks);
            out.push((stack(&[&p.clean, p.cluttered.as_ref().unwrap()]), p.clean.clone(), tasks));
        }
    }
    out
}

/// Discriminator outputs of `x` (network forward only).
fn disc_rows(model: &Model<f64>, x: &Tensor<f64>) -> Vec<DiscOutput> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    model.discriminator.forward(&mut g, Bind::frozen(&model.store), v).outputs(&g)
}

struct Forward {
    rec: Tensor<f64>,
    mrec: Option<Tensor<f64>>,
    masked: Option<Tensor<f64>>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    maps: Vec<AttentionMap>,
}

fn forward(model: &Model<f64>, x: &Tensor<f64>, tasks: &[TaskSpec], noise: Tensor<f64>) -> Forward {
    let mut g = Graph::new();
    let p = Bind::frozen(&model.store);
    let xv = g.constant(x.clone());
    let o = g.constant(object_tensor(tasks));
    let e = model.encode(&mut g, p, xv, o, Some(noise));
    let (rec, mrec) = model.generate(&mut g, p, e.latent.z);
    let codes = e.latent.codes(&g);
    Forward {
        rec: g.value(rec).clone(),
        mrec: mrec.map(|m| g.value(m).clone()),
        masked: e.masked.map(|m| g.value(m).clone()),
        mu: codes.iter().map(|c| c.mu.clone()).collect(),
        sigma: codes.iter().map(|c| c.sigma.clone()).collect(),
        maps: e.attention.map(|a| read_maps(&g, &a)).unwrap_or_default(),
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `(l_real, l_fake, l_noise)` recomputed row by row; the rng is replayed in the order the
/// training step draws from it.
pub fn disc_oracle(model: &Model<f64>, batch: &VisionBatch<f64>, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let (ns, nc) = (model.vision.n_shapes, model.vision.n_colors);
    let mut real = Vec::new();
    for (x, tasks) in
        [(batch.demo.as_ref().map(|d| (&d.clean, &d.tasks))), batch.synth.as_ref().map(|s| (&s.clean, &s.tasks)).filter(|_| model.arch != Arch::Baseline)].into_iter().flatten()
    {
        for (o, t) in disc_rows(model, x).iter().zip(tasks.iter()) {
            real.push(ce_oracle(&o.shape_logits, t.shape) + ce_oracle(&o.color_logits, t.color));
        }
    }
    if model.arch != Arch::Baseline {
        if let Some(rc) = &batch.real_clutter {
            let us: Vec<f64> = (0..=ns).map(|c| if c < ns { 1.0 / ns as f64 } else { 0.0 }).collect();
            let uc: Vec<f64> = (0..=nc).map(|c| if c < nc { 1.0 / nc as f64 } else { 0.0 }).collect();
            for o in disc_rows(model, rc) {
                real.push(soft_ce_oracle(&o.shape_logits, &us) + soft_ce_oracle(&o.color_logits, &uc));
            }
        }
    }
    let mut fake = Vec::new();
    for (x, _, tasks) in blocks(model, batch) {
        let noise = normal_tensor(rng, &[tasks.len(), model.vision.d_z]);
        let f = forward(model, &x, &tasks, noise);
        for o in disc_rows(model, &f.rec) {
            fake.push(ce_oracle(&o.shape_logits, ns) + ce_oracle(&o.color_logits, nc));
        }
    }
    let mut noise_terms = Vec::new();
    if batch.n_noise > 0 {
        let z = normal_tensor(rng, &[batch.n_noise, model.vision.d_z]);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let (gen, _) = model.generate(&mut g, Bind::frozen(&model.store), zv);
        let gen = g.value(gen).clone();
        for o in disc_rows(model, &gen) {
            noise_terms.push(ce_oracle(&o.shape_logits, ns) + ce_oracle(&o.color_logits, nc));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&real), mean(&fake), mean(&noise_terms))
}

/// Masked mean mixture NLL of a teacher-forced sequence through `μ_z`.
pub fn motor_oracle(model: &Model<f64>, seq: &SeqBatch<f64>) -> f64 {
    let mut g = Graph::new();
    let p = Bind::frozen(&model.store);
    let b = seq.tasks.len();
    let task = g.constant(task_tensor(&seq.tasks));
    let objects = g.constant(object_tensor(&seq.tasks));
    let mut state = model.controller.zero_state(&mut g, b);
    let (mut sum, mut total) = (0.0, 0.0);
    for t in 0..seq.len() {
        let latent = match &seq.input {
            SeqInput::Frames(f) => {
                let x = g.constant(f[t].clone());
                model.encode(&mut g, p, x, objects, None).latent.mu
            }
            SeqInput::Latents(z) => g.constant(z[t].clone()),
        };
        let prev = g.constant(seq.prev[t].clone());
        let (mix, next) = model.controller.step(&mut g, p, latent, task, prev, &state, false);
        state = next;
        let targets = rows(&seq.targets[t]);
        for (r, target) in targets.iter().enumerate().take(b) {
            let m = seq.mask[t][r];
            total += m;
            if m != 0.0 {
                sum += m * mdn_oracle(&mix.params(&g, r, model.motor_cfg.joints), target);
            }
        }
    }
    sum / total
}

/// Generator-side terms recomputed row by row: `(l_gd, l_rec, l_fea, l_prior, l_a, l_mrec)`.
pub fn gen_oracle(model: &Model<f64>, batch: &VisionBatch<f64>, sparsity: f64, rng: &mut ChaCha8Rng) -> [Option<f64>; 6] {
    let (mut gd, mut rec, mut fea, mut prior, mut att, mut mrec) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut n_rows = 0usize;
    for (x, clean, tasks) in blocks(model, batch) {
        let noise = normal_tensor(rng, &[tasks.len(), model.vision.d_z]);
        let f = forward(model, &x, &tasks, noise);
        let d_rec = disc_rows(model, &f.rec);
        let d_clean = disc_rows(model, &clean);
        let per = clean.dim(0);
        let clean_rows = rows(&clean);
        let rec_rows = rows(&f.rec);
        for (r, (o, t)) in d_rec.iter().zip(&tasks).enumerate() {
            gd += ce_oracle(&o.shape_logits, t.shape) + ce_oracle(&o.color_logits, t.color);
            prior += kl_oracle(&f.mu[r], &f.sigma[r]);
            let fd: f64 = o.features.iter().zip(&d_clean[r % per].features).map(|(a, b)| (a - b) * (a - b)).sum();
            fea += fd / per as f64;
        }
        for k in 0..tasks.len() / per {
            let pair: Vec<f64> = (0..per).map(|r| mse(&rec_rows[k * per + r], &clean_rows[r])).collect();
            rec += pair.iter().sum::<f64>() / per as f64;
        }
        if let (Some(net), Some(mr), Some(m)) = (&model.attention, &f.mrec, &f.masked) {
            let (mr, m) = (rows(mr), rows(m));
            for k in 0..tasks.len() / per {
                mrec += (0..per).map(|r| mse(&mr[k * per + r], &m[k * per + r])).sum::<f64>() / per as f64;
            }
            for (map, t) in f.maps.iter().zip(&tasks) {
                let pooled = asor_core::ea::pool_and_classify(map, net, &model.store).unwrap();
                att += attention_loss(map, &pooled, t, sparsity).unwrap();
            }
        }
        n_rows += tasks.len();
    }
    let n = n_rows as f64;
    let ea = model.arch == Arch::Ea;
    [Some(gd / n), Some(rec), Some(fea), Some(prior / n), ea.then_some(att / n), ea.then_some(mrec)]
}

/// Worst absolute error of the composed bundles over `draws` random batches per architecture.
pub fn bundle_errors(draws: usize) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for arch in Arch::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + arch as u64);
        let (mut e_d, mut e_g) = (0.0f64, 0.0f64);
        for draw in 0..draws {
            let model = Model::<f64>::new(arch, toy_vision(), toy_motor(), draw as u64).unwrap();
            let b = rng.gen_range(1..3);
            let batch = random_batch(&mut rng, b);
            let seq = random_seq(&mut rng, 2, 3);
            let w = LossWeights {
                gd: rng.gen_range(0.1..2.0),
                rec: rng.gen_range(0.1..2.0),
                fea: rng.gen_range(0.1..2.0),
                prior: rng.gen_range(0.1..2.0),
                motor: rng.gen_range(0.1..2.0),
                attention: rng.gen_range(0.1..2.0),
                mrec: rng.gen_range(0.1..2.0),
                sparsity: rng.gen_range(0.1..2.0),
            };
            let seed = rng.gen();

            let (_, _, d) = disc_graph(&model, &batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (lr, lf, ln) = disc_oracle(&model, &batch, &mut ChaCha8Rng::seed_from_u64(seed));
            for (a, b) in [(d.l_real, lr), (d.l_fake, lf), (d.l_noise, ln), (d.l_d, lr + lf + ln)] {
                e_d = e_d.max((a - b).abs());
            }

            let (_, _, gt) = gen_graph(&model, &batch, Some(&seq), &w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let o = gen_oracle(&model, &batch, w.sparsity, &mut ChaCha8Rng::seed_from_u64(seed));
            let motor = motor_oracle(&model, &seq);
            let pairs = [
                (Some(gt.l_gd), o[0]),
                (Some(gt.l_rec), o[1]),
                (Some(gt.l_fea), o[2]),
                (Some(gt.l_prior), o[3]),
                (gt.l_a, o[4]),
                (gt.l_mrec, o[5]),
                (Some(gt.l_motor), Some(motor)),
            ];
            for (a, b) in pairs {
                match (a, b) {
                    (Some(a), Some(b)) => e_g = e_g.max((a - b).abs()),
                    (None, None) => {}
                    _ => e_g = f64::INFINITY,
                }
            }
            let weights = [w.gd, w.rec, w.fea, w.prior, w.attention, w.mrec];
            let total = o.iter().zip(weights).map(|(v, k)| v.unwrap_or(0.0) * k).sum::<f64>() + w.motor * motor;
            e_g = e_g.max((gt.l_g - total).abs());
        }
        out.push((format!("l_d {}", arch.tag()), e_d));
        out.push((format!("l_g {}", arch.tag()), e_g));
    }
    out
}

/// One-line verdict for the whole suite.
pub fn check() -> Result<String, String> {
    let start = std::time::Instant::now();
    let terms = term_errors();
    let bundles = bundle_errors(20);
    let secs = start.elapsed().as_secs_f64();
    let worst_term = terms.iter().map(|t| t.1).fold(0.0, f64::max);
    let worst_bundle = bundles.iter().map(|t| t.1).fold(0.0, f64::max);
    let mut bad: Vec<String> = terms.iter().filter(|t| !(t.1 <= TOL)).map(|t| format!("{} {:.1e}", t.0, t.1)).collect();
    bad.extend(bundles.iter().filter(|t| !(t.1 <= TOL_BUNDLE)).map(|t| format!("{} {:.1e}", t.0, t.1)));
    if secs >= 60.0 {
        bad.push(format!("runtime {secs:.1}s"));
    }
    let detail = format!("{} terms x {DRAWS} draws max err {worst_term:.1e}; {} bundles max err {worst_bundle:.1e}; {secs:.1}s", terms.len(), bundles.len());
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", bad.join(", ")))
    }
}
