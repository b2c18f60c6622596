//! Adversarial, reconstruction and prior loss terms.
//!
//! Every term is built on the autodiff [`Graph`] so training and the scalar helpers below share
//! one implementation. Batched terms average over rows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::task::TaskSpec;
use crate::tensor::Tensor;

/// Lower bound on every predicted scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Classifier-discriminator output for one frame. The last index of each head is "fake".
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    pub shape_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
    pub features: Vec<f64>,
}

/// Soft class targets for one head, one row per sample.
pub fn one_hot_rows<T: Real>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * classes + l] = T::one();
    }
    t
}

/// Uniform target over every class except the trailing fake one.
pub fn non_fake_rows<T: Real>(rows: usize, classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, classes]);
    let w = T::lit(1.0 / (classes - 1) as f64);
    for r in 0..rows {
        for c in 0..classes - 1 {
            t.data_mut()[r * classes + c] = w;
        }
    }
    t
}

/// Mean over rows of `-Σ target · log_softmax(logits)`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, targets: Tensor<T>) -> Var {
    assert_eq!(g.shape(logits), targets.shape(), "cross-entropy target shape");
    let rows = targets.dim(0);
    let lsm = g.log_softmax(logits);
    let t = g.constant(targets);
    let picked = g.mul(lsm, t);
    let total = g.sum(picked);
    g.scale(total, T::lit(-1.0 / rows as f64))
}

/// Two-head classification loss against explicit per-row targets.
pub fn two_head_ce<T: Real>(g: &mut Graph<T>, shape_logits: Var, color_logits: Var, shape_t: Tensor<T>, color_t: Tensor<T>) -> Var {
    let a = cross_entropy(g, shape_logits, shape_t);
    let b = cross_entropy(g, color_logits, color_t);
    g.add(a, b)
}

/// Real frames classified as their target object's shape and color.
pub fn g_loss_real<T: Real>(g: &mut Graph<T>, shape_logits: Var, color_logits: Var, shapes: &[usize], colors: &[usize]) -> Var {
    let (s1, c1) = (g.shape(shape_logits)[1], g.shape(color_logits)[1]);
    two_head_ce(g, shape_logits, color_logits, one_hot_rows(shapes, s1), one_hot_rows(colors, c1))
}

/// Generated frames classified as fake on both heads.
pub fn g_loss_fake<T: Real>(g: &mut Graph<T>, shape_logits: Var, color_logits: Var) -> Var {
    let rows = g.shape(shape_logits)[0];
    let (s1, c1) = (g.shape(shape_logits)[1], g.shape(color_logits)[1]);
    g_loss_real(g, shape_logits, color_logits, &vec![s1 - 1; rows], &vec![c1 - 1; rows])
}

/// Sum over the four pairs of mean squared error; each pair is `[B, ...]` with matching shapes.
pub fn g_loss_rec<T: Real>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(rec, target) in pairs {
        assert_eq!(g.shape(rec), g.shape(target), "reconstruction shape mismatch");
        let d = g.sub(rec, target);
        let sq = g.square(d);
        let m = g.mean(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    acc.expect("at least one reconstruction pair")
}

/// Sum over pairs of the per-row squared L2 distance, averaged over rows.
pub fn g_loss_fea<T: Real>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(a, b) in pairs {
        assert_eq!(g.shape(a), g.shape(b), "feature shape mismatch");
        let rows = g.shape(a)[0];
        let d = g.sub(a, b);
        let sq = g.square(d);
        let s = g.sum(sq);
        let m = g.scale(s, T::lit(1.0 / rows as f64));
        acc = Some(match acc {
            Some(x) => g.add(x, m),
            None => m,
        });
    }
    acc.expect("at least one feature pair")
}

/// `Σ_d 0.5 (μ² + σ² − 1 − 2 ln σ)` averaged over rows, with `ln σ` given directly.
pub fn g_loss_prior<T: Real>(g: &mut Graph<T>, mu: Var, ln_sigma: Var) -> Var {
    let rows = g.shape(mu)[0];
    let mu2 = g.square(mu);
    let two_ln = g.scale(ln_sigma, T::lit(2.0));
    let sig2 = g.exp(two_ln);
    let a = g.add(mu2, sig2);
    let b = g.sub(a, two_ln);
    let s = g.sum(b);
    let dims = g.value(mu).len();
    let half = g.scale(s, T::lit(0.5 / rows as f64));
    let c = g.constant(Tensor::scalar(T::lit(-0.5 * dims as f64 / rows as f64)));
    g.add(half, c)
}

/// Clamped log-scale: `ln σ = max(raw, ln floor)`.
pub fn g_ln_sigma<T: Real>(g: &mut Graph<T>, raw: Var) -> Var {
    g.clamp_min(raw, T::lit(libm::log(SIGMA_FLOOR)))
}

fn check_logits(out: &DiscOutput, task: &TaskSpec) -> Result<()> {
    if out.shape_logits.len() != task.n_shapes + 1 || out.color_logits.len() != task.n_colors + 1 {
        bail!(Dimension, "logit widths {}/{} for {} shapes and {} colors", out.shape_logits.len(), out.color_logits.len(), task.n_shapes, task.n_colors);
    }
    Ok(())
}

fn head_loss(out: &DiscOutput, shape: usize, color: usize) -> Result<f64> {
    if shape >= out.shape_logits.len() || color >= out.color_logits.len() {
        bail!(Label, "label ({shape}, {color}) out of range");
    }
    if out.shape_logits.iter().chain(&out.color_logits).any(|v| !v.is_finite()) {
        bail!(Input, "non-finite logits");
    }
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(&[1, out.shape_logits.len()], out.shape_logits.clone()));
    let c = g.constant(Tensor::new(&[1, out.color_logits.len()], out.color_logits.clone()));
    let l = g_loss_real(&mut g, s, c, &[shape], &[color]);
    Ok(g.scalar(l))
}

/// Cross-entropy of both heads against the task's true classes.
pub fn loss_real(out: &DiscOutput, task: &TaskSpec) -> Result<f64> {
    check_logits(out, task)?;
    head_loss(out, task.shape, task.color)
}

/// Cross-entropy of both heads against the fake classes.
pub fn loss_fake(out: &DiscOutput) -> Result<f64> {
    head_loss(out, out.shape_logits.len() - 1, out.color_logits.len() - 1)
}

/// Same functional form as [`loss_fake`], applied to frames generated from prior samples.
pub fn loss_noise(out: &DiscOutput) -> Result<f64> {
    loss_fake(out)
}

/// Generator's adversarial term: its reconstructions should read as the true target.
pub fn loss_gadv(out: &DiscOutput, task: &TaskSpec) -> Result<f64> {
    loss_real(out, task)
}

/// Sum of mean squared errors over reconstruction/target pairs.
pub fn loss_rec(recs: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
    if recs.len() != targets.len() || recs.is_empty() {
        bail!(Dimension, "{} reconstructions for {} targets", recs.len(), targets.len());
    }
    let mut g = Graph::<f64>::new();
    let mut pairs = Vec::new();
    for (r, t) in recs.iter().zip(targets) {
        if r.len() != t.len() {
            bail!(Dimension, "reconstruction of {} values against target of {}", r.len(), t.len());
        }
        let a = g.constant(Tensor::new(&[1, r.len()], r.to_vec()));
        let b = g.constant(Tensor::new(&[1, t.len()], t.to_vec()));
        pairs.push((a, b));
    }
    let l = g_loss_rec(&mut g, &pairs);
    Ok(g.scalar(l))
}

/// Sum of squared L2 distances over feature pairs.
pub fn loss_fea(f_recs: &[&[f64]], f_targets: &[&[f64]]) -> Result<f64> {
    if f_recs.len() != f_targets.len() || f_recs.is_empty() {
        bail!(Dimension, "{} feature vectors for {} targets", f_recs.len(), f_targets.len());
    }
    let mut g = Graph::<f64>::new();
    let mut pairs = Vec::new();
    for (r, t) in f_recs.iter().zip(f_targets) {
        if r.len() != t.len() {
            bail!(Dimension, "feature length {} vs {}", r.len(), t.len());
        }
        let a = g.constant(Tensor::new(&[1, r.len()], r.to_vec()));
        let b = g.constant(Tensor::new(&[1, t.len()], t.to_vec()));
        pairs.push((a, b));
    }
    let l = g_loss_fea(&mut g, &pairs);
    Ok(g.scalar(l))
}

/// KL divergence from `N(μ, diag σ²)` to the standard normal.
pub fn loss_prior(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        bail!(Dimension, "mu of {} and sigma of {}", mu.len(), sigma.len());
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        bail!(Domain, "sigma {s} must be positive");
    }
    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::new(&[1, mu.len()], mu.to_vec()));
    let ls = g.constant(Tensor::new(&[1, mu.len()], sigma.iter().map(|s| libm::log(*s)).collect()));
    let l = g_loss_prior(&mut g, m, ls);
    Ok(g.scalar(l))
}

/// Every named loss term of one training step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBundle {
    pub l_real: f64,
    pub l_fake: f64,
    pub l_noise: f64,
    pub l_d: f64,
    pub l_gd: f64,
    pub l_rec: f64,
    pub l_fea: f64,
    pub l_prior: f64,
    pub l_motor: f64,
    pub l_a: Option<f64>,
    pub l_mrec: Option<f64>,
    pub l_g: f64,
}

impl LossBundle {
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("l_real", self.l_real),
            ("l_fake", self.l_fake),
            ("l_noise", self.l_noise),
            ("l_d", self.l_d),
            ("l_gd", self.l_gd),
            ("l_rec", self.l_rec),
            ("l_fea", self.l_fea),
            ("l_prior", self.l_prior),
            ("l_motor", self.l_motor),
        ];
        if let Some(a) = self.l_a {
            v.push(("l_a", a));
        }
        if let Some(m) = self.l_mrec {
            v.push(("l_mrec", m));
        }
        v.push(("l_g", self.l_g));
        v
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((name, v)) = self.fields().into_iter().find(|(_, v)| !v.is_finite()) {
            bail!(Input, "{name} = {v}");
        }
        let d = self.l_real + self.l_fake + self.l_noise;
        if (d - self.l_d).abs() > 1e-9 * (1.0 + d.abs()) {
            return Err(crate::Error::Validation(format!("l_d {} != {}", self.l_d, d)));
        }
        Ok(())
    }
}
