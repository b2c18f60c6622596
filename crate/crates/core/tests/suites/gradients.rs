//! Analytic gradients of the training objectives against central finite differences.
#![allow(dead_code)]

use asor_core::graph::Graph;
use asor_core::model::{Arch, Model};
use asor_core::motor::{g_mdn_nll, MixtureVars, MotorConfig};
use asor_core::nets::VisionConfig;
use asor_core::nn::{ParamId, ParamStore};
use asor_core::task::{Action, TaskSpec};
use asor_core::tensor::Tensor;
use asor_core::train::{disc_graph, gen_graph, LossWeights, PairBlock, SeqBatch, SeqInput, VisionBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

fn toy_motor() -> MotorConfig {
    MotorConfig { d_z: 3, task_dim: 6, joints: 2, hidden: 2, layers: 3, components: 2 }
}

fn frames(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Tensor<f64> {
    Tensor::new(&[n, 3, res, res], (0..n * 3 * res * res).map(|_| rng.gen_range(0.0..1.0)).collect())
}

fn tasks(rng: &mut ChaCha8Rng, n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|_| {
            let a = if rng.gen_bool(0.5) { Action::PickUp } else { Action::PushRight };
            TaskSpec::new(a, rng.gen_range(0..2), rng.gen_range(0..2), 2, 2).unwrap()
        })
        .collect()
}

fn batch(rng: &mut ChaCha8Rng) -> VisionBatch<f64> {
    let res = VisionConfig::toy().resolution;
    let demo = PairBlock { clean: frames(rng, 2, res), cluttered: Some(frames(rng, 2, res)), tasks: tasks(rng, 2) };
    let synth = PairBlock { clean: frames(rng, 2, res), cluttered: Some(frames(rng, 2, res)), tasks: tasks(rng, 2) };
    VisionBatch { demo: Some(demo), synth: Some(synth), real_clutter: Some(frames(rng, 1, res)), n_noise: 2 }
}

fn seq(rng: &mut ChaCha8Rng, joints: usize) -> SeqBatch<f64> {
    let (b, l) = (2, 3);
    let res = VisionConfig::toy().resolution;
    let cmd = |rng: &mut ChaCha8Rng| Tensor::new(&[b, joints], (0..b * joints).map(|_| rng.gen_range(-0.5..0.5)).collect());
    SeqBatch {
        input: SeqInput::Frames((0..l).map(|_| frames(rng, b, res)).collect()),
        tasks: tasks(rng, b),
        prev: (0..l).map(|_| cmd(rng)).collect(),
        targets: (0..l).map(|_| cmd(rng)).collect(),
        mask: vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]],
    }
}

/// Worst relative error over every entry of `ids`, perturbing the store in place.
fn max_rel_err(model: &mut Model<f64>, ids: &[ParamId], analytic: &[Option<Tensor<f64>>], f: &dyn Fn(&Model<f64>) -> f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &id in ids {
        let n = model.store.get(id).len();
        for i in 0..n {
            let x = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = x + H;
            let up = f(model);
            model.store.get_mut(id).data_mut()[i] = x - H;
            let down = f(model);
            model.store.get_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[id.index()].as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Moves every parameter off its initial value so no activation sits exactly on a kink.
fn jitter(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
}

fn nonzero(grads: &[Option<Tensor<f64>>], ids: &[ParamId]) -> bool {
    ids.iter().any(|id| grads[id.index()].as_ref().is_some_and(|t| t.data().iter().any(|v| *v != 0.0)))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(name: &str, err: f64) -> Result<f64, String> {
    ensure(err < TOL, format!("{name}: max relative error {err:.2e}"))?;
    Ok(err)
}

/// `l_d` for both attention variants; returns the worst relative error.
pub fn discriminator() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for arch in [Arch::Ia, Arch::Ea] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = Model::<f64>::new(arch, VisionConfig::toy(), toy_motor(), 3).unwrap();
        jitter(&mut model, 1);
        let b = batch(&mut rng);
        let eval = |m: &Model<f64>| {
            let (g, l, _) = disc_graph(m, &b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            g.scalar(l)
        };
        let (g, l, terms) = disc_graph(&model, &b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        ensure((terms.l_real + terms.l_fake + terms.l_noise - terms.l_d).abs() < 1e-12, "l_d decomposition")?;
        let grads = g.backward(l).for_params(&g, &model.store);
        let ids = model.disc_ids();
        ensure(model.store.count(Some(&ids)) <= 1000, "discriminator over 1k parameters")?;
        ensure(nonzero(&grads, &ids), "discriminator gradient is zero")?;
        ensure(!nonzero(&grads, &model.gen_ids()), "generator must be frozen in the discriminator step")?;
        let (err, _) = max_rel_err(&mut model, &ids, &grads, &eval);
        worst = worst.max(within(&format!("l_d {}", arch.tag()), err)?);
    }
    Ok(worst)
}

/// The toy vision config with a narrower attention branch.
fn small_vision() -> VisionConfig {
    VisionConfig { channels: [2, 2, 2, 2], task_channels: 1, d_phi: 2, d_psi: 2, head_hidden: 2, ..VisionConfig::toy() }
}

/// `l_g` including the controller term; returns the worst relative error.
pub fn generator(arch: Arch) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = Model::<f64>::new(arch, small_vision(), toy_motor(), 4).unwrap();
    jitter(&mut model, 2);
    let b = batch(&mut rng);
    let s = seq(&mut rng, 2);
    let w = LossWeights::default();
    let eval = |m: &Model<f64>| {
        let (g, l, _) = gen_graph(m, &b, Some(&s), &w, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        g.scalar(l)
    };
    let (g, l, terms) = gen_graph(&model, &b, Some(&s), &w, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    ensure(terms.l_a.is_some() == (arch == Arch::Ea), "attention term presence")?;
    let grads = g.backward(l).for_params(&g, &model.store);
    ensure(!nonzero(&grads, &model.disc_ids()), "discriminator must be frozen in the generator step")?;
    let mut ids = model.gen_ids();
    ids.extend(model.motor_ids());
    for group in [model.gen_ids(), model.motor_ids()] {
        ensure(model.store.count(Some(&group)) <= 1000, format!("{} parameters in a checked group", model.store.count(Some(&group))))?;
        ensure(nonzero(&grads, &group), "zero gradient group")?;
    }
    let (err, _) = max_rel_err(&mut model, &ids, &grads, &eval);
    within(&format!("l_g {}", arch.tag()), err)
}

pub fn task_fusion_live() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::<f64>::new(Arch::Ia, VisionConfig::toy(), toy_motor(), 9).unwrap();
    let b = batch(&mut rng);
    let (g, l, _) = gen_graph(&model, &b, None, &LossWeights::default(), &mut rng).unwrap();
    let grads = g.backward(l).for_params(&g, &model.store);
    let fusion = model.store.ids_with_prefix("enc.fuse");
    ensure(!fusion.is_empty(), "no fusion parameters")?;
    ensure(nonzero(&grads, &fusion), "task fusion receives no gradient")
}

/// Mixture NLL with respect to logits, means and log-scales directly.
pub fn mixture_nll() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, n, j) = (3, 3, 7);
    let rand = |rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(lo..hi)).collect() };
    let logits = rand(&mut rng, b * n, -2.0, 2.0);
    let mu = rand(&mut rng, b * n * j, -1.0, 1.0);
    let ls = rand(&mut rng, b * n * j, -1.5, 0.5);
    let target = Tensor::new(&[b, j], rand(&mut rng, b * j, -1.0, 1.0));
    let weights = [1.0, 0.5, 2.0];
    let eval = |lg: &[f64], m: &[f64], s: &[f64]| {
        let mut g = Graph::<f64>::new();
        let mix = MixtureVars {
            logits: g.constant(Tensor::new(&[b, n], lg.to_vec())),
            mu: g.constant(Tensor::new(&[b, n * j], m.to_vec())),
            ln_sigma: g.constant(Tensor::new(&[b, n * j], s.to_vec())),
        };
        let (l, _) = g_mdn_nll(&mut g, &mix, &target, &weights);
        g.scalar(l)
    };
    let mut store = ParamStore::<f64>::new();
    let ids = [
        store.add("logits", Tensor::new(&[b, n], logits.clone())),
        store.add("mu", Tensor::new(&[b, n * j], mu.clone())),
        store.add("ln_sigma", Tensor::new(&[b, n * j], ls.clone())),
    ];
    let mut g = Graph::<f64>::new();
    let vars = ids.map(|id| g.param(&store, id));
    let mix = MixtureVars { logits: vars[0], mu: vars[1], ln_sigma: vars[2] };
    let (l, _) = g_mdn_nll(&mut g, &mix, &target, &weights);
    let grads = g.backward(l);
    let mut inputs = [logits, mu, ls];
    let mut worst = 0.0f64;
    for k in 0..3 {
        let analytic = grads.of(vars[k]).unwrap().data().to_vec();
        for i in 0..inputs[k].len() {
            let x = inputs[k][i];
            inputs[k][i] = x + H;
            let up = eval(&inputs[0], &inputs[1], &inputs[2]);
            inputs[k][i] = x - H;
            let down = eval(&inputs[0], &inputs[1], &inputs[2]);
            inputs[k][i] = x;
            let num = (up - down) / (2.0 * H);
            worst = worst.max((analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(FLOOR));
        }
    }
    within("mdn_nll", worst)
}

/// Controller NLL on cached latents; vision parameters must stay out of the graph.
pub fn controller_nll() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut model = Model::<f64>::new(Arch::Baseline, VisionConfig::toy(), toy_motor(), 5).unwrap();
    jitter(&mut model, 3);
    let mut s = seq(&mut rng, 2);
    s.input = SeqInput::Latents((0..s.len()).map(|_| Tensor::new(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect());
    let eval = |m: &Model<f64>| {
        let (g, l) = asor_core::train::motor_graph(m, &s).unwrap();
        g.scalar(l)
    };
    let (g, l) = asor_core::train::motor_graph(&model, &s).unwrap();
    let grads = g.backward(l).for_params(&g, &model.store);
    ensure(!nonzero(&grads, &model.vision_ids()), "vision parameters in the fine-tuning graph")?;
    let ids = model.motor_ids();
    ensure(model.store.count(Some(&ids)) <= 1000, "controller over 1k parameters")?;
    let (err, _) = max_rel_err(&mut model, &ids, &grads, &eval);
    within("controller nll", err)
}

/// One-line verdict for the whole suite.
pub fn check() -> Result<String, String> {
    let d = discriminator()?;
    let ia = generator(Arch::Ia)?;
    let ea = generator(Arch::Ea)?;
    let m = mixture_nll()?;
    let c = controller_nll()?;
    task_fusion_live()?;
    Ok(format!("max relative error l_d {d:.1e}, l_g ia {ia:.1e}, l_g ea {ea:.1e}, mdn_nll {m:.1e}, controller {c:.1e} (tol {TOL:.0e})"))
}
