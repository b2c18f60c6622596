//! Closed-loop rollouts of a policy in the simulator, with an optional mid-episode disturbance.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::motor::{controller_step, sample_action, ControllerState};
use crate::real::Real;
use crate::sim::render::render;
use crate::sim::{DemoConfig, Expert, Frame, FrameKind, Scene, Sim, SuccessTracker};
use crate::task::{Action, TaskSpec};

/// Maps observations to the next joint command.
pub trait Policy {
    fn reset(&mut self, sim: &Sim, task: &TaskSpec, scene: &Scene, seed: u64) -> Result<()>;
    fn act(&mut self, sim: &Sim, scene: &Scene, frame: Option<&Frame>) -> Result<Vec<f64>>;
    /// Whether [`Policy::act`] reads the rendered frame.
    fn needs_frames(&self) -> bool;
}

/// The scripted demonstrator, reading the true scene.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub cfg: DemoConfig,
    expert: Option<Expert>,
}

impl ExpertPolicy {
    pub fn new(cfg: DemoConfig) -> Self {
        Self { cfg, expert: None }
    }
}

impl Policy for ExpertPolicy {
    fn reset(&mut self, _sim: &Sim, task: &TaskSpec, _scene: &Scene, seed: u64) -> Result<()> {
        self.expert = Some(Expert::new(*task, self.cfg.clone(), seed));
        Ok(())
    }

    fn act(&mut self, sim: &Sim, scene: &Scene, _frame: Option<&Frame>) -> Result<Vec<f64>> {
        match &mut self.expert {
            Some(e) => e.act(sim, scene),
            None => bail!(Config, "policy used before reset"),
        }
    }

    fn needs_frames(&self) -> bool {
        false
    }
}

/// Holds the arm where it is.
#[derive(Debug, Clone, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn reset(&mut self, _sim: &Sim, _task: &TaskSpec, _scene: &Scene, _seed: u64) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _sim: &Sim, scene: &Scene, _frame: Option<&Frame>) -> Result<Vec<f64>> {
        Ok(scene.arm.command())
    }

    fn needs_frames(&self) -> bool {
        false
    }
}

/// A trained model: frame and task to latent mean, then a mixture draw from the controller.
#[derive(Debug, Clone)]
pub struct LearnedPolicy<'a, T> {
    pub model: &'a Model<T>,
    /// Draw from the mixture; otherwise take the mean of the most probable component.
    pub sample: bool,
    task: Option<TaskSpec>,
    state: Option<ControllerState>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> LearnedPolicy<'a, T> {
    pub fn new(model: &'a Model<T>, sample: bool) -> Self {
        Self { model, sample, task: None, state: None, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl<T: Real> Policy for LearnedPolicy<'_, T> {
    fn reset(&mut self, sim: &Sim, task: &TaskSpec, scene: &Scene, seed: u64) -> Result<()> {
        let m = &self.model;
        if task.n_shapes != m.vision.n_shapes || task.n_colors != m.vision.n_colors {
            bail!(Dimension, "{}x{} task for a {}x{} model", task.n_shapes, task.n_colors, m.vision.n_shapes, m.vision.n_colors);
        }
        if sim.cfg.command_dim() != m.motor_cfg.joints {
            bail!(Dimension, "{}-dim commands for a {}-joint controller", sim.cfg.command_dim(), m.motor_cfg.joints);
        }
        self.task = Some(*task);
        self.state = Some(ControllerState::reset(&m.motor_cfg, &scene.arm.command()));
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(())
    }

    fn act(&mut self, _sim: &Sim, _scene: &Scene, frame: Option<&Frame>) -> Result<Vec<f64>> {
        let (Some(task), Some(state)) = (self.task, self.state.as_ref()) else {
            bail!(Config, "policy used before reset");
        };
        let frame = frame.ok_or_else(|| Error::Input("learned policy needs a frame".into()))?;
        let z = self.model.latent_means(&[frame], &[task])?.remove(0);
        let (params, mut next) = controller_step(&self.model.controller, &self.model.store, &z, &task.encode().values, state)?;
        let cmd = if self.sample { sample_action(&params, &mut self.rng) } else { params.mode_mean() };
        next.prev = cmd.clone();
        self.state = Some(next);
        Ok(cmd)
    }

    fn needs_frames(&self) -> bool {
        true
    }
}

/// One-time teleport of the target, triggered at the first grasp (pick) or when the effector
/// comes within `approach_radius` of the target (push), or at `fallback_tick` at the latest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    /// Offset as a fraction of the table width.
    pub fraction: f64,
    pub approach_radius: f64,
    pub fallback_tick: usize,
}

impl Default for Disturbance {
    fn default() -> Self {
        Self { fraction: 0.25, approach_radius: 0.15, fallback_tick: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub task: TaskSpec,
    pub clutter: bool,
    pub success: bool,
    pub steps: usize,
    pub min_distance: f64,
    pub disturbed: bool,
    pub recovered: bool,
}

fn target_distance(sim: &Sim, scene: &Scene) -> f64 {
    let e = sim.effector(&scene.arm);
    scene.target().map(|t| libm::hypot(e.x - t.position.0, e.y - t.position.1)).unwrap_or(f64::INFINITY)
}

/// Moves the target `fraction · width` away in a random direction that keeps it manipulable and clear
/// of other objects; releases it if held.
pub fn displace_target<R: Rng>(sim: &Sim, scene: &Scene, task: &TaskSpec, fraction: f64, rng: &mut R) -> Result<Scene> {
    let ti = scene.target_index().ok_or(Error::TargetMissing)?;
    let from = scene.objects[ti].position;
    let d = fraction * scene.table.width();
    let region = sim.spawn_region(task.action);
    let clear = |p: (f64, f64)| scene.objects.iter().enumerate().all(|(i, o)| i == ti || libm::hypot(o.position.0 - p.0, o.position.1 - p.1) >= 2.0 * o.size);
    let start: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let mut fallback = None;
    for k in 0..72 {
        let a = start + k as f64 * core::f64::consts::TAU / 72.0;
        let p = (from.0 + d * libm::cos(a), from.1 + d * libm::sin(a));
        if region.contains(p) && sim.reachable(p) {
            if clear(p) {
                fallback = Some(p);
                break;
            }
            fallback.get_or_insert(p);
        }
    }
    let p = fallback.ok_or_else(|| Error::Placement("no valid displacement for the target".into()))?;
    let mut out = scene.clone();
    out.objects[ti].position = p;
    out.objects[ti].grabbed = false;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub max_steps: usize,
    /// Frame size seen by the policy.
    pub resolution: usize,
    pub disturbance: Option<Disturbance>,
}

/// Runs `policy` from `scene` for up to `max_steps` ticks.
pub fn rollout<P: Policy + ?Sized>(policy: &mut P, sim: &Sim, task: &TaskSpec, scene: &Scene, seed: u64, cfg: &RolloutConfig) -> Result<EpisodeResult> {
    let RolloutConfig { max_steps, resolution, disturbance } = *cfg;
    let target = scene.target().ok_or(Error::TargetMissing)?;
    if !task.same_object(target.shape_id, target.color_id) {
        return Err(Error::TargetMissing);
    }
    let clutter = scene.objects.len() > 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d157);
    policy.reset(sim, task, scene, seed)?;
    let mut tracker = SuccessTracker::new(task, scene)?;
    let mut cur = scene.clone();
    let mut min_distance = target_distance(sim, &cur);
    let mut disturbed = false;
    let result = |steps, success, min_distance, disturbed| EpisodeResult { task: *task, clutter, success, steps, min_distance, disturbed, recovered: disturbed && success };
    for t in 0..max_steps {
        if let Some(d) = disturbance {
            let trigger = match task.action {
                Action::PickUp => cur.target().is_some_and(|o| o.grabbed),
                Action::PushRight => target_distance(sim, &cur) < d.approach_radius,
            };
            if !disturbed && (trigger || t >= d.fallback_tick) {
                cur = displace_target(sim, &cur, task, d.fraction, &mut rng)?;
                tracker.rebase(&cur);
                disturbed = true;
            }
        }
        let frame = if policy.needs_frames() { Some(render(sim, &cur, resolution, FrameKind::Demo)?) } else { None };
        let cmd = policy.act(sim, &cur, frame.as_ref())?;
        if cmd.iter().any(|v| !v.is_finite()) {
            bail!(Input, "policy produced a non-finite command at tick {t}");
        }
        cur = sim.step(&cur, &cmd)?;
        min_distance = min_distance.min(target_distance(sim, &cur));
        if tracker.update(&sim.cfg, &cur) && (disturbance.is_none() || disturbed) {
            return Ok(result(t + 1, true, min_distance, disturbed));
        }
    }
    Ok(result(max_steps, false, min_distance, disturbed))
}
