//! Complete policy models: vision networks for one architecture plus the controller.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ea::{mask_frames, read_maps, AttentionMap, AttentionNet, AttentionVars};
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::DiscOutput;
use crate::motor::{Controller, MotorConfig};
use crate::nets::{frames_tensor, object_tensor, Discriminator, Encoder, Generator, LatentVars, VisionConfig};
use crate::nn::{Bind, ParamId, ParamStore};
use crate::real::Real;
use crate::sim::{Frame, FrameKind};
use crate::task::TaskSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    /// Task-conditioned encoder, implicit attention.
    Ia,
    /// Task-focused attention mask in front of an unconditioned encoder.
    Ea,
    /// Unconditioned encoder trained without synthetic clutter; the task reaches only the controller.
    Baseline,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Ia, Arch::Ea, Arch::Baseline];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Ia => "ia",
            Arch::Ea => "ea",
            Arch::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ia" => Ok(Arch::Ia),
            "ea" => Ok(Arch::Ea),
            "baseline" | "baseline_no_attention" => Ok(Arch::Baseline),
            other => Err(Error::Config(alloc::format!("unknown arch {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Arch,
    pub vision: VisionConfig,
    pub motor_cfg: MotorConfig,
    pub store: ParamStore<T>,
    pub attention: Option<AttentionNet>,
    pub encoder: Encoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub controller: Controller,
}

/// What one encoder pass produced.
#[derive(Debug, Clone, Copy)]
pub struct EncodeVars {
    pub latent: LatentVars,
    pub attention: Option<AttentionVars>,
    pub masked: Option<Var>,
}

impl<T: Real> Model<T> {
    pub fn new(arch: Arch, vision: VisionConfig, motor_cfg: MotorConfig, seed: u64) -> Result<Self> {
        vision.validate()?;
        if motor_cfg.d_z != vision.d_z {
            bail!(Config, "controller latent width {} differs from d_z {}", motor_cfg.d_z, vision.d_z);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attention = (arch == Arch::Ea).then(|| AttentionNet::new(&mut store, &mut rng, "att", &vision));
        let encoder = Encoder::new(&mut store, &mut rng, "enc", &vision, arch == Arch::Ia);
        let out_ch = if arch == Arch::Ea { 6 } else { 3 };
        let generator = Generator::new(&mut store, &mut rng, "gen", &vision, out_ch);
        let discriminator = Discriminator::new(&mut store, &mut rng, "disc", &vision);
        let controller = Controller::new(&mut store, &mut rng, "motor", &motor_cfg);
        Ok(Self { arch, vision, motor_cfg, store, attention, encoder, generator, discriminator, controller })
    }

    pub fn disc_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("disc.")
    }

    /// Encoder, generator and (for EA) attention parameters.
    pub fn gen_ids(&self) -> Vec<ParamId> {
        let mut ids = self.store.ids_with_prefix("enc.");
        ids.extend(self.store.ids_with_prefix("gen."));
        ids.extend(self.store.ids_with_prefix("att."));
        ids
    }

    pub fn motor_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("motor.")
    }

    /// Everything except the controller.
    pub fn vision_ids(&self) -> Vec<ParamId> {
        let mut ids = self.gen_ids();
        ids.extend(self.disc_ids());
        ids
    }

    pub fn uses_task_in_vision(&self) -> bool {
        self.arch != Arch::Baseline
    }

    /// Frames through attention (EA) and encoder. `objects` is `[B, |s|+|c|]`.
    pub fn encode(&self, g: &mut Graph<T>, p: Bind<T>, frames: Var, objects: Var, noise: Option<Tensor<T>>) -> EncodeVars {
        match (&self.attention, self.arch) {
            (Some(att), _) => {
                let a = att.attend(g, p, frames, objects);
                let m = mask_frames(g, frames, a.p_tfa);
                let latent = self.encoder.encode(g, p, m, None, noise);
                EncodeVars { latent, attention: Some(a), masked: Some(m) }
            }
            (None, Arch::Ia) => EncodeVars { latent: self.encoder.encode(g, p, frames, Some(objects), noise), attention: None, masked: None },
            (None, _) => EncodeVars { latent: self.encoder.encode(g, p, frames, None, noise), attention: None, masked: None },
        }
    }

    /// `(O′, M′)`; `M′` only for EA.
    pub fn generate(&self, g: &mut Graph<T>, p: Bind<T>, z: Var) -> (Var, Option<Var>) {
        let out = self.generator.forward(g, p, z);
        if self.arch == Arch::Ea {
            let o = g.slice(out, 1, 0, 3);
            let m = g.slice(out, 1, 3, 3);
            (o, Some(m))
        } else {
            (out, None)
        }
    }

    fn inputs(&self, g: &mut Graph<T>, frames: &[&Frame], tasks: &[TaskSpec]) -> Result<(Var, Var)> {
        if frames.len() != tasks.len() || frames.is_empty() {
            bail!(Dimension, "{} frames for {} tasks", frames.len(), tasks.len());
        }
        if let Some(t) = tasks.iter().find(|t| t.n_shapes != self.vision.n_shapes || t.n_colors != self.vision.n_colors) {
            bail!(Dimension, "task over {}x{} objects for a {}x{} model", t.n_shapes, t.n_colors, self.vision.n_shapes, self.vision.n_colors);
        }
        let x = g.constant(frames_tensor(frames, self.vision.resolution)?);
        let o = g.constant(object_tensor(tasks));
        Ok((x, o))
    }

    /// Deterministic `μ_z` rows.
    pub fn latent_means(&self, frames: &[&Frame], tasks: &[TaskSpec]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let (x, o) = self.inputs(&mut g, frames, tasks)?;
        let e = self.encode(&mut g, Bind::frozen(&self.store), x, o, None);
        Ok(e.latent.codes(&g).into_iter().map(|c| c.mu).collect())
    }

    pub fn latent_codes(&self, frames: &[&Frame], tasks: &[TaskSpec]) -> Result<Vec<crate::nets::LatentCode>> {
        let mut g = Graph::new();
        let (x, o) = self.inputs(&mut g, frames, tasks)?;
        let e = self.encode(&mut g, Bind::frozen(&self.store), x, o, None);
        Ok(e.latent.codes(&g))
    }

    /// Reconstructions from `μ_z`: `O′` and, for EA, `M′` and the mask `M`.
    pub fn reconstruct(&self, frames: &[&Frame], tasks: &[TaskSpec]) -> Result<Vec<Reconstruction>> {
        let mut g = Graph::new();
        let (x, o) = self.inputs(&mut g, frames, tasks)?;
        let p = Bind::frozen(&self.store);
        let e = self.encode(&mut g, p, x, o, None);
        let (rec, mrec) = self.generate(&mut g, p, e.latent.mu);
        let res = self.vision.resolution;
        let to_frames = |g: &Graph<T>, v: Var, kind: FrameKind| -> Result<Vec<Frame>> {
            let t = g.value(v);
            (0..t.dim(0)).map(|r| Frame::from_chw(t.outer(r), res, res, kind)).collect()
        };
        let o_rec = to_frames(&g, rec, FrameKind::Reconstruction)?;
        let m_rec = match mrec {
            Some(v) => Some(to_frames(&g, v, FrameKind::MaskedReconstruction)?),
            None => None,
        };
        let masks = match e.masked {
            Some(v) => Some(to_frames(&g, v, FrameKind::Masked)?),
            None => None,
        };
        Ok((0..frames.len()).map(|i| Reconstruction { o_rec: o_rec[i].clone(), m_rec: m_rec.as_ref().map(|m| m[i].clone()), mask: masks.as_ref().map(|m| m[i].clone()) }).collect())
    }

    pub fn attention_maps(&self, frames: &[&Frame], tasks: &[TaskSpec]) -> Result<Vec<AttentionMap>> {
        let Some(att) = &self.attention else {
            bail!(Config, "{} model has no attention", self.arch.tag());
        };
        let mut g = Graph::new();
        let (x, o) = self.inputs(&mut g, frames, tasks)?;
        let a = att.attend(&mut g, Bind::frozen(&self.store), x, o);
        Ok(read_maps(&g, &a))
    }

    pub fn discriminate(&self, frames: &[&Frame]) -> Result<Vec<DiscOutput>> {
        let mut g = Graph::new();
        let x = g.constant(frames_tensor(frames, self.vision.resolution)?);
        let d = self.discriminator.forward(&mut g, Bind::frozen(&self.store), x);
        Ok(d.outputs(&g))
    }

    pub fn param_count(&self) -> usize {
        self.store.count(None)
    }

    pub fn describe(&self) -> String {
        alloc::format!(
            "{} model: {} parameters (vision {}, controller {})",
            self.arch.tag(),
            self.param_count(),
            self.store.count(Some(&self.vision_ids())),
            self.store.count(Some(&self.motor_ids()))
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub o_rec: Frame,
    pub m_rec: Option<Frame>,
    pub mask: Option<Frame>,
}
