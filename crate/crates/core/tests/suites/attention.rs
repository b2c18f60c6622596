//! Thresholding, masking and pooled selection of the task-focused attention.
#![allow(dead_code)]

use asor_core::ea::{mask, pool, pool_and_classify, AttentionMap};
use asor_core::graph::Graph;
use asor_core::model::{Arch, Model};
use asor_core::motor::MotorConfig;
use asor_core::nets::{frames_tensor, object_tensor, VisionConfig};
use asor_core::nn::Bind;
use asor_core::sim::render::to_byte;
use asor_core::sim::{Frame, FrameKind};
use asor_core::task::{Action, TaskSpec};
use asor_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const T: f64 = 0.5;
pub const DRAWS: usize = 1000;
pub const TOL: f64 = 1e-6;

pub fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    Frame::from_data(w, h, FrameKind::Demo, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, k_h: usize, k_w: usize, d: usize) -> AttentionMap {
    let p = (0..k_h * k_w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut m = AttentionMap::from_scores(p, k_h, k_w, T).unwrap();
    m.phi_f = (0..k_h * k_w).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    m
}

/// Entries where `p_tfa` is not bitwise `max(p − 0.5, 0)`.
pub fn threshold_mismatches(m: &AttentionMap) -> usize {
    m.p.iter().zip(&m.p_tfa).filter(|(&p, &q)| (p - T).max(0.0).to_bits() != q.to_bits()).count()
}

/// Pixels where `mask` disagrees with a per-pixel scaling by the covering grid cell.
pub fn mask_mismatches(frame: &Frame, m: &AttentionMap) -> usize {
    let out = mask(frame, m).unwrap();
    let mut bad = 0;
    for y in 0..frame.height {
        for x in 0..frame.width {
            let cell = (y * m.k_h / frame.height) * m.k_w + x * m.k_w / frame.width;
            let w = m.p_tfa[cell];
            let want = frame.pixel(x, y).map(|v| to_byte(v as f64 / 255.0 * w));
            bad += usize::from(out.pixel(x, y) != want);
        }
    }
    bad
}

pub fn weighted_sum(m: &AttentionMap) -> Vec<f64> {
    let d = m.phi_f[0].len();
    (0..d).map(|c| (0..m.k()).map(|j| m.p_tfa[j] * m.phi_f[j][c]).sum()).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Σ_k p_tfa_k φ_k` through the differentiable pooling op.
pub fn graph_pool(m: &AttentionMap) -> Vec<f64> {
    let d = m.phi_f[0].len();
    let k = m.k();
    let phi: Vec<f64> = (0..d).flat_map(|c| (0..k).map(move |j| (c, j))).map(|(c, j)| m.phi_f[j][c]).collect();
    let mut g = Graph::<f64>::new();
    let phi = g.constant(Tensor::new(&[1, d, m.k_h, m.k_w], phi));
    let pt = g.constant(Tensor::new(&[1, 1, m.k_h, m.k_w], m.p_tfa.clone()));
    let out = pool(&mut g, phi, pt);
    g.value(out).data().to_vec()
}

pub fn toy_model(seed: u64) -> Model<f64> {
    let motor = MotorConfig { d_z: 3, task_dim: 6, joints: 2, hidden: 2, layers: 3, components: 2 };
    let mut model = Model::<f64>::new(Arch::Ea, VisionConfig::toy(), motor, seed).unwrap();
    // spread the untrained region scores across both sides of the threshold
    let w_p = model.attention.as_ref().unwrap().w_p;
    for v in model.store.get_mut(w_p).data_mut() {
        *v *= 40.0;
    }
    model
}

fn toy_tasks(rng: &mut ChaCha8Rng, n: usize) -> Vec<TaskSpec> {
    (0..n).map(|_| TaskSpec::new(Action::PickUp, rng.gen_range(0..2), rng.gen_range(0..2), 2, 2).unwrap()).collect()
}

/// Threshold mismatches, mask error and the number of regions above and below threshold,
/// from the model's own attention pass over `n` random frames.
pub fn model_pass(seed: u64, n: usize) -> (usize, f64, usize, usize) {
    let model = toy_model(seed);
    assert_eq!(model.vision.threshold, T);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = model.vision.resolution;
    let frames: Vec<Frame> = (0..n).map(|_| random_frame(&mut rng, res, res)).collect();
    let refs: Vec<&Frame> = frames.iter().collect();
    let tasks = toy_tasks(&mut rng, n);
    let maps = model.attention_maps(&refs, &tasks).unwrap();
    let mismatches = maps.iter().map(threshold_mismatches).sum();
    let (above, below) = maps.iter().flat_map(|m| &m.p).fold((0, 0), |(a, b), &p| if p > T { (a + 1, b) } else { (a, b + 1) });

    let mut g = Graph::<f64>::new();
    let x = g.constant(frames_tensor(&refs, res).unwrap());
    let o = g.constant(object_tensor(&tasks));
    let e = model.encode(&mut g, Bind::frozen(&model.store), x, o, None);
    let xs = g.value(x).data().to_vec();
    let ms = g.value(e.masked.unwrap()).data().to_vec();
    let mut err = 0.0f64;
    for (b, m) in maps.iter().enumerate() {
        for c in 0..3 {
            for y in 0..res {
                for xx in 0..res {
                    let i = ((b * 3 + c) * res + y) * res + xx;
                    let cell = (y * m.k_h / res) * m.k_w + xx * m.k_w / res;
                    err = err.max((ms[i] - xs[i] * m.p_tfa[cell]).abs());
                }
            }
        }
    }
    (mismatches, err, above, below)
}

/// One-line verdict over thresholding, masking and pooled selection.
pub fn check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let (mut thr, mut msk, mut pool_err, mut graph_err) = (0, 0, 0.0f64, 0.0f64);
    let model = toy_model(0);
    let store = &model.store;
    let net = model.attention.as_ref().unwrap();
    for _ in 0..DRAWS {
        let (k_h, k_w) = ([1, 2, 4, 8][rng.gen_range(0..4)], [1, 2, 4, 8][rng.gen_range(0..4)]);
        let scale = rng.gen_range(1..5);
        let d = net.shape_hidden.in_dim;
        let m = random_map(&mut rng, k_h, k_w, d);
        thr += threshold_mismatches(&m);
        msk += mask_mismatches(&random_frame(&mut rng, k_w * scale, k_h * scale), &m);
        let want = weighted_sum(&m);
        pool_err = pool_err.max(max_abs(&pool_and_classify(&m, net, store).unwrap().p_f, &want));
        graph_err = graph_err.max(max_abs(&graph_pool(&m), &want));
    }
    if thr > 0 {
        failures.push(format!("{thr} thresholded scores differ"));
    }
    if msk > 0 {
        failures.push(format!("{msk} masked pixels differ"));
    }
    if pool_err > TOL || graph_err > TOL {
        failures.push(format!("pooling error {pool_err:.2e} / {graph_err:.2e}"));
    }

    let f = random_frame(&mut rng, 32, 32);
    let mut m = random_map(&mut rng, 4, 4, net.shape_hidden.in_dim);
    m.p_tfa = vec![1.0; 16];
    if mask(&f, &m).unwrap().data != f.data {
        failures.push("unit mask is not the identity".into());
    }
    m.p_tfa = vec![0.0; 16];
    if mask(&f, &m).unwrap().data.iter().any(|&v| v != 0) || weighted_sum(&m).iter().any(|&v| v != 0.0) || graph_pool(&m).iter().any(|&v| v != 0.0) {
        failures.push("zero mask keeps content".into());
    }
    for j in 0..16 {
        m.p_tfa = (0..16).map(|i| f64::from(u8::from(i == j))).collect();
        if graph_pool(&m) != m.phi_f[j] || pool_and_classify(&m, net, store).unwrap().p_f != m.phi_f[j] {
            failures.push(format!("one-hot selection of region {j} is not phi_f[{j}]"));
        }
    }

    let (mm, merr, above, below) = model_pass(1, 64);
    if mm > 0 || merr > TOL {
        failures.push(format!("model pass: {mm} threshold mismatches, mask error {merr:.2e}"));
    }
    if above == 0 || below == 0 {
        failures.push(format!("model scores do not straddle the threshold ({above} above, {below} below)"));
    }

    let detail = format!("{DRAWS} maps, pooling error {:.1e}, model mask error {merr:.1e}, {above}/{} model regions active", pool_err.max(graph_err), above + below);
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}
