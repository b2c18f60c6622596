//! Mixture-density recurrent controller.
//!
//! Three stacked LSTM layers with skip connections: every layer sees the step input next to the
//! previous layer's output, and the heads see all layer outputs. The heads emit a diagonal
//! Gaussian mixture over the next `J`-dim command. Component means are offsets from the previous
//! command, which the controller also receives as input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::losses::g_ln_sigma;
use crate::nn::{Bind, Linear, LstmCell, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct MotorConfig {
    pub d_z: usize,
    pub task_dim: usize,
    pub joints: usize,
    pub hidden: usize,
    pub layers: usize,
    pub components: usize,
}

impl Default for MotorConfig {
    fn default() -> Self {
        Self { d_z: 64, task_dim: 9, joints: 7, hidden: 64, layers: 3, components: 3 }
    }
}

impl MotorConfig {
    pub fn input_dim(&self) -> usize {
        self.d_z + self.task_dim + self.joints
    }
}

/// Mixture over the next command: `alpha[N]`, `mu[N][J]`, `sigma[N][J]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub alpha: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.alpha.len();
        if n == 0 || self.mu.len() != n || self.sigma.len() != n {
            bail!(Dimension, "mixture with {} weights, {} means, {} scales", n, self.mu.len(), self.sigma.len());
        }
        let j = self.mu[0].len();
        if self.mu.iter().chain(&self.sigma).any(|r| r.len() != j) {
            bail!(Dimension, "ragged mixture components");
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0)) {
            bail!(Domain, "negative mixing weight");
        }
        let total: f64 = self.alpha.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            bail!(Domain, "mixing weights sum to {total}");
        }
        if self.sigma.iter().flatten().any(|&s| !(s > 0.0)) {
            bail!(Domain, "non-positive scale");
        }
        Ok(())
    }

    pub fn joints(&self) -> usize {
        self.mu[0].len()
    }

    /// `Σ α_i μ_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.joints()];
        for (a, mu) in self.alpha.iter().zip(&self.mu) {
            for (acc, v) in m.iter_mut().zip(mu) {
                *acc += a * v;
            }
        }
        m
    }

    /// Mean of the most probable component.
    pub fn mode_mean(&self) -> Vec<f64> {
        let mut best = 0;
        for (i, &a) in self.alpha.iter().enumerate() {
            if a > self.alpha[best] {
                best = i;
            }
        }
        self.mu[best].clone()
    }
}

/// Mixture head outputs of a batch: `logits [B, N]`, `mu [B, N·J]`, `ln_sigma [B, N·J]`.
#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    pub logits: Var,
    pub mu: Var,
    pub ln_sigma: Var,
}

impl MixtureVars {
    pub fn params<T: Real>(&self, g: &Graph<T>, row: usize, joints: usize) -> MixtureParams {
        let logits: Vec<f64> = g.value(self.logits).outer(row).iter().map(|v| v.as_f64()).collect();
        let lse = crate::graph::logsumexp(&logits);
        let alpha = logits.iter().map(|l| libm::exp(l - lse)).collect();
        let rows = |v: Var, f: fn(f64) -> f64| -> Vec<Vec<f64>> { g.value(v).outer(row).chunks(joints).map(|c| c.iter().map(|x| f(x.as_f64())).collect()).collect() };
        MixtureParams { alpha, mu: rows(self.mu, |x| x), sigma: rows(self.ln_sigma, libm::exp) }
    }
}

/// Recurrent state as graph nodes, one `(h, c)` pair per layer.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub cells: Vec<LstmCell>,
    pub alpha: Linear,
    pub mu: Linear,
    pub sigma: Linear,
    pub cfg: MotorConfig,
}

impl Controller {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &MotorConfig) -> Self {
        let x = cfg.input_dim();
        let cells = (0..cfg.layers)
            .map(|l| {
                let input = if l == 0 { x } else { x + cfg.hidden };
                LstmCell::new(store, rng, &format!("{name}.lstm{l}"), input, cfg.hidden)
            })
            .collect();
        let top = cfg.hidden * cfg.layers;
        let nj = cfg.components * cfg.joints;
        let alpha = Linear::new(store, rng, &format!("{name}.alpha"), top, cfg.components);
        let mu = Linear::new(store, rng, &format!("{name}.mu"), top, nj);
        let sigma = Linear::new(store, rng, &format!("{name}.sigma"), top, nj);
        // start the offsets near zero so the initial policy holds still
        for id in [mu.w, mu.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= T::lit(0.01));
        }
        store.get_mut(sigma.b).data_mut().iter_mut().for_each(|v| *v = T::lit(-2.0));
        Self { cells, alpha, mu, sigma, cfg: cfg.clone() }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> StateVars {
        let z = || Tensor::zeros(&[batch, self.cfg.hidden]);
        StateVars { h: (0..self.cfg.layers).map(|_| g.constant(z())).collect(), c: (0..self.cfg.layers).map(|_| g.constant(z())).collect() }
    }

    /// One step. `latent [B, d_z]`, `task [B, task_dim]`, `prev [B, J]` (the previous command).
    /// With `ablate_skips` the skip inputs are replaced by zeros.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: Bind<T>, latent: Var, task: Var, prev: Var, state: &StateVars, ablate_skips: bool) -> (MixtureVars, StateVars) {
        let b = g.shape(latent)[0];
        let x = g.concat(&[latent, task, prev], 1);
        let x_skip = if ablate_skips { g.constant(Tensor::zeros(&[b, self.cfg.input_dim()])) } else { x };
        let mut h_out = Vec::with_capacity(self.cfg.layers);
        let mut c_out = Vec::with_capacity(self.cfg.layers);
        for (l, cell) in self.cells.iter().enumerate() {
            let input = if l == 0 { x } else { g.concat(&[x_skip, h_out[l - 1]], 1) };
            let (h, c) = cell.step(g, p, input, state.h[l], state.c[l]);
            h_out.push(h);
            c_out.push(c);
        }
        let top = if ablate_skips {
            let last = *h_out.last().unwrap();
            let mut parts: Vec<Var> = (0..self.cfg.layers - 1).map(|_| g.constant(Tensor::zeros(&[b, self.cfg.hidden]))).collect();
            parts.push(last);
            g.concat(&parts, 1)
        } else {
            g.concat(&h_out, 1)
        };
        let logits = self.alpha.forward(g, p, top);
        let offset = self.mu.forward(g, p, top);
        let base: Vec<Var> = (0..self.cfg.components).map(|_| prev).collect();
        let base = g.concat(&base, 1);
        let mu = g.add(base, offset);
        let raw = self.sigma.forward(g, p, top);
        let ln_sigma = g_ln_sigma(g, raw);
        (MixtureVars { logits, mu, ln_sigma }, StateVars { h: h_out, c: c_out })
    }
}

/// Per-row `−ln Σ_i α_i Π_j N(t_j; μ_ij, σ_ij)` with `α = softmax(logits)`; rows weighted by
/// `weights` and summed. Returns `(weighted sum node, per-row NLL node)`.
pub fn g_mdn_nll<T: Real>(g: &mut Graph<T>, mix: &MixtureVars, target: &Tensor<T>, weights: &[f64]) -> (Var, Var) {
    let (b, n) = (g.shape(mix.logits)[0], g.shape(mix.logits)[1]);
    let j = target.dim(1);
    assert_eq!(g.shape(mix.mu), &[b, n * j], "mixture mean shape");
    let mut tiled = Vec::with_capacity(b * n * j);
    for r in 0..b {
        for _ in 0..n {
            tiled.extend_from_slice(target.outer(r));
        }
    }
    let t = g.constant(Tensor::new(&[b, n * j], tiled));
    let diff = g.sub(t, mix.mu);
    let neg = g.scale(mix.ln_sigma, T::lit(-1.0));
    let inv = g.exp(neg);
    let zz = g.mul(diff, inv);
    let sq = g.square(zz);
    let half = g.scale(sq, T::lit(-0.5));
    let dens = g.sub(half, mix.ln_sigma);
    let cst = g.constant(Tensor::full(&[b, n * j], T::lit(-0.5 * LN_2PI)));
    let dens = g.add(dens, cst);
    let dens = g.reshape(dens, &[b, n, j]);
    let comp = g.sum_last(dens);
    let log_alpha = g.log_softmax(mix.logits);
    let joint = g.add(comp, log_alpha);
    let ll = g.logsumexp(joint);
    let nll = g.scale(ll, T::lit(-1.0));
    let w = g.constant(Tensor::new(&[b], weights.iter().map(|&v| T::lit(v)).collect()));
    let weighted = g.mul(nll, w);
    (g.sum(weighted), nll)
}

/// Negative log-likelihood of `target` under the mixture.
pub fn mdn_nll(params: &MixtureParams, target: &[f64]) -> Result<f64> {
    params.validate()?;
    let (n, j) = (params.alpha.len(), params.joints());
    if target.len() != j {
        bail!(Dimension, "target of {} joints for a {j}-joint mixture", target.len());
    }
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::new(&[1, n], params.alpha.iter().map(|a| libm::log(*a)).collect()));
    let mu = g.constant(Tensor::new(&[1, n * j], params.mu.concat()));
    let ln_sigma = g.constant(Tensor::new(&[1, n * j], params.sigma.iter().flatten().map(|s| libm::log(*s)).collect()));
    let (total, _) = g_mdn_nll(&mut g, &MixtureVars { logits, mu, ln_sigma }, &Tensor::new(&[1, j], target.to_vec()), &[1.0]);
    Ok(g.scalar(total))
}

/// Draws a component by `α`, then an independent Gaussian per joint.
pub fn sample_action<R: Rng>(params: &MixtureParams, rng: &mut R) -> Vec<f64> {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut pick = params.alpha.len() - 1;
    for (i, a) in params.alpha.iter().enumerate() {
        acc += a;
        if u < acc {
            pick = i;
            break;
        }
    }
    params.mu[pick]
        .iter()
        .zip(&params.sigma[pick])
        .map(|(m, s)| {
            let e: f64 = StandardNormal.sample(rng);
            m + s * e
        })
        .collect()
}

/// Per-rollout recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub step: usize,
    /// Last command sent to the arm.
    pub prev: Vec<f64>,
}

impl ControllerState {
    pub fn reset(cfg: &MotorConfig, initial_command: &[f64]) -> Self {
        Self { h: vec![vec![0.0; cfg.hidden]; cfg.layers], c: vec![vec![0.0; cfg.hidden]; cfg.layers], step: 0, prev: initial_command.to_vec() }
    }
}

/// Inference step from a latent code; the returned state still carries the old `prev`,
/// which the caller updates with the command it actually sends.
pub fn controller_step<T: Real>(ctrl: &Controller, store: &ParamStore<T>, latent: &[f64], task: &[f64], state: &ControllerState) -> Result<(MixtureParams, ControllerState)> {
    let cfg = &ctrl.cfg;
    if latent.len() != cfg.d_z || task.len() != cfg.task_dim || state.prev.len() != cfg.joints {
        bail!(Dimension, "controller expects latent {}, task {}, command {}; got {}, {}, {}", cfg.d_z, cfg.task_dim, cfg.joints, latent.len(), task.len(), state.prev.len());
    }
    let mut g = Graph::<T>::new();
    let row = |g: &mut Graph<T>, v: &[f64]| g.constant(Tensor::new(&[1, v.len()], v.iter().map(|&x| T::lit(x)).collect()));
    let z = row(&mut g, latent);
    let t = row(&mut g, task);
    let prev = row(&mut g, &state.prev);
    let vars = StateVars { h: state.h.iter().map(|h| row(&mut g, h)).collect(), c: state.c.iter().map(|c| row(&mut g, c)).collect() };
    let (mix, next) = ctrl.step(&mut g, Bind::frozen(store), z, t, prev, &vars, false);
    let read = |g: &Graph<T>, v: Var| g.value(v).data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let params = mix.params(&g, 0, cfg.joints);
    let state =
        ControllerState { h: next.h.iter().map(|&v| read(&g, v)).collect(), c: next.c.iter().map(|&v| read(&g, v)).collect(), step: state.step + 1, prev: state.prev.clone() };
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_density() {
        let s = 1.0 / libm::sqrt(2.0 * core::f64::consts::PI);
        let p = MixtureParams { alpha: vec![1.0], mu: vec![vec![0.3]], sigma: vec![vec![s]] };
        assert!(mdn_nll(&p, &[0.3]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_equal_components() {
        let p = MixtureParams { alpha: vec![0.5, 0.5], mu: vec![vec![1.0], vec![1.0]], sigma: vec![vec![1.0], vec![1.0]] };
        assert!((mdn_nll(&p, &[1.0]).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let p = MixtureParams { alpha: vec![0.7, 0.2], mu: vec![vec![0.0], vec![0.0]], sigma: vec![vec![1.0], vec![1.0]] };
        assert!(matches!(mdn_nll(&p, &[0.0]), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn degenerate_sample_is_the_mean() {
        let p = MixtureParams { alpha: vec![1.0], mu: vec![vec![0.4, -1.0]], sigma: vec![vec![1e-4, 1e-4]] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = sample_action(&p, &mut rng);
        assert!((a[0] - 0.4).abs() < 4e-4 && (a[1] + 1.0).abs() < 4e-4);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_action(&p, &mut r1), sample_action(&p, &mut r2));
    }

    fn small() -> (ParamStore<f64>, Controller) {
        let cfg = MotorConfig { d_z: 3, task_dim: 4, joints: 2, hidden: 5, layers: 3, components: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ctrl = Controller::new(&mut store, &mut rng, "motor", &cfg);
        (store, ctrl)
    }

    #[test]
    fn alpha_is_a_distribution_and_steps_are_deterministic() {
        let (store, ctrl) = small();
        let run = || {
            let mut s = ControllerState::reset(&ctrl.cfg, &[0.1, 0.2]);
            let mut out = Vec::new();
            for t in 0..4 {
                let (p, next) = controller_step(&ctrl, &store, &[0.1 * t as f64, 0.0, -0.3], &[1., 0., 0., 1.], &s).unwrap();
                assert!((p.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                p.validate().unwrap();
                out.push(p);
                s = next;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn skips_are_live() {
        let (store, ctrl) = small();
        let outputs = |ablate: bool| {
            let mut g = Graph::<f64>::new();
            let z = g.constant(Tensor::from_f64(&[1, 3], &[0.5, -0.2, 0.9]));
            let t = g.constant(Tensor::from_f64(&[1, 4], &[1., 0., 0., 1.]));
            let prev = g.constant(Tensor::from_f64(&[1, 2], &[0.3, 0.1]));
            let s = ctrl.zero_state(&mut g, 1);
            let (m, _) = ctrl.step(&mut g, Bind::frozen(&store), z, t, prev, &s, ablate);
            g.value(m.logits).clone()
        };
        assert!(outputs(false).max_abs_diff(&outputs(true)) > 0.0);
    }
}
