//! Scripted demonstrator.
//!
//! The expert replans from the current scene every tick, so it retries after a missed or
//! dropped grasp and after the target is moved.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::render::{render, Frame, FrameKind};
use super::{two_link_ik, Scene, Sim, SuccessTracker};
use crate::error::{bail, Error, Result};
use crate::task::{Action, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    /// Standard deviation of the per-tick waypoint jitter.
    pub wobble: f64,
    /// Probability that a grasp slips while lifting, forcing a retry.
    pub slip_prob: f64,
    pub hover_lift: f64,
    pub max_speed: f64,
    pub gain: f64,
    pub lift_speed: f64,
    pub push_speed: f64,
    pub resolution: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { wobble: 0.003, slip_prob: 0.1, hover_lift: 0.6, max_speed: 0.06, gain: 0.5, lift_speed: 0.2, push_speed: 0.03, resolution: 64 }
    }
}

/// Time-aligned frames and commands: `commands[t]` was sent after observing `frames[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskSpec,
    pub frames: Vec<Frame>,
    pub commands: Vec<Vec<f64>>,
    pub initial: Scene,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn target_start(&self) -> (f64, f64) {
        self.initial.target().map(|t| t.position).unwrap_or((0.5, 0.5))
    }
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub task: TaskSpec,
    pub cfg: DemoConfig,
    rng: ChaCha8Rng,
    slip_armed: bool,
}

impl Expert {
    pub fn new(task: TaskSpec, cfg: DemoConfig, seed: u64) -> Self {
        Self { task, cfg, rng: ChaCha8Rng::seed_from_u64(seed), slip_armed: false }
    }

    /// Command for the next tick.
    pub fn act(&mut self, sim: &Sim, scene: &Scene) -> Result<Vec<f64>> {
        let target = scene.target().ok_or(Error::TargetMissing)?.clone();
        let eff = sim.effector(&scene.arm);
        let here = (eff.x, eff.y);
        let lift = scene.arm.lift();
        let c = self.cfg.clone();
        let (goal, new_lift, grip) = match self.task.action {
            Action::PickUp => {
                if target.grabbed {
                    if self.slip_armed && lift > 0.45 {
                        self.slip_armed = false;
                        (here, lift, 0.0)
                    } else {
                        (here, lift + c.lift_speed, 1.0)
                    }
                } else if scene.arm.closed() {
                    (here, lift + c.lift_speed, 0.0)
                } else {
                    let d = dist(here, target.position);
                    if d > 0.012 {
                        if lift < c.hover_lift - 0.05 && d > 0.03 {
                            (here, lift + c.lift_speed, 0.0)
                        } else {
                            (self.toward(here, target.position), c.hover_lift.max(lift.min(c.hover_lift)), 0.0)
                        }
                    } else if lift > 0.05 {
                        (self.toward(here, target.position), lift - c.lift_speed, 0.0)
                    } else {
                        self.slip_armed = self.rng.gen_bool(c.slip_prob);
                        (here, 0.0, 1.0)
                    }
                }
            }
            Action::PushRight => {
                let reach = sim.cfg.effector_radius + target.size;
                let stage = (target.position.0 - reach - 0.01, target.position.1);
                let ahead = target.position.0 - here.0;
                let pushing = lift < sim.cfg.contact_height && (here.1 - target.position.1).abs() < 0.03 && ahead > 0.0 && ahead < reach + 0.03;
                if pushing {
                    let dy = (target.position.1 - here.1).clamp(-0.01, 0.01);
                    (self.jitter((here.0 + c.push_speed, here.1 + dy)), 0.0, 0.0)
                } else {
                    let d = dist(here, stage);
                    if lift < c.hover_lift - 0.05 && d > 0.03 {
                        (here, lift + c.lift_speed, 0.0)
                    } else if d > 0.012 {
                        (self.toward(here, stage), c.hover_lift.max(lift.min(c.hover_lift)), 0.0)
                    } else {
                        (self.toward(here, stage), lift - c.lift_speed, 0.0)
                    }
                }
            }
        };
        Ok(self.command(sim, goal, new_lift, grip))
    }

    fn toward(&mut self, from: (f64, f64), to: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let d = libm::hypot(dx, dy);
        let step = (d * self.cfg.gain).min(self.cfg.max_speed).max(d.min(0.008));
        let f = if d > 1e-12 { step / d } else { 0.0 };
        self.jitter((from.0 + dx * f, from.1 + dy * f))
    }

    fn jitter(&mut self, p: (f64, f64)) -> (f64, f64) {
        if self.cfg.wobble <= 0.0 {
            return p;
        }
        let n = Normal::new(0.0, self.cfg.wobble).unwrap();
        (p.0 + n.sample(&mut self.rng), p.1 + n.sample(&mut self.rng))
    }

    fn command(&self, sim: &Sim, goal: (f64, f64), lift: f64, grip: f64) -> Vec<f64> {
        let cfg = &sim.cfg;
        let (l1, l2) = cfg.effective_links();
        let (q0, q1) = two_link_ik(goal.0 - cfg.base.0, goal.1 - cfg.base.1, l1, l2);
        let mut cmd = alloc::vec![0.0; cfg.command_dim()];
        cmd[0] = q0;
        cmd[1] = q1;
        cmd[cfg.lift_index()] = lift;
        sim.clamp_joints(&mut cmd[..cfg.n_revolute() + 1]);
        cmd[cfg.gripper_index()] = grip;
        cmd
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    libm::hypot(a.0 - b.0, a.1 - b.1)
}

/// Runs the expert on an uncluttered scene until the task succeeds.
pub fn scripted_demo(sim: &Sim, task: &TaskSpec, scene: &Scene, seed: u64, max_steps: usize, cfg: &DemoConfig) -> Result<Trajectory> {
    let target = scene.target().ok_or(Error::TargetMissing)?;
    if !task.same_object(target.shape_id, target.color_id) {
        return Err(Error::TargetMissing);
    }
    if scene.objects.len() != 1 {
        bail!(Validation, "demonstration scenes hold only the target, got {} objects", scene.objects.len());
    }
    let mut expert = Expert::new(*task, cfg.clone(), seed);
    let mut tracker = SuccessTracker::new(task, scene)?;
    let mut frames = Vec::new();
    let mut commands = Vec::new();
    let mut cur = scene.clone();
    for _ in 0..max_steps {
        frames.push(render(sim, &cur, cfg.resolution, FrameKind::Demo)?);
        let cmd = expert.act(sim, &cur)?;
        cur = sim.step(&cur, &cmd)?;
        commands.push(cmd);
        if tracker.update(&sim.cfg, &cur) {
            return Ok(Trajectory { task: *task, frames, commands, initial: scene.clone(), success: true });
        }
    }
    Err(Error::ExpertFailure(max_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    fn run(action: Action, seed: u64) -> (Sim, Trajectory) {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let task = TaskSpec::new(action, 2, 1, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sim.sample_scene(&mut rng, &task, 0).unwrap();
        let cfg = DemoConfig { resolution: 32, ..DemoConfig::default() };
        let traj = scripted_demo(&sim, &task, &scene, seed, 600, &cfg).unwrap();
        (sim, traj)
    }

    #[test]
    fn pick_demo_ends_lifted() {
        let (sim, traj) = run(Action::PickUp, 4);
        assert!(traj.success);
        assert_eq!(traj.frames.len(), traj.commands.len());
        let mut scene = traj.initial.clone();
        for c in &traj.commands {
            scene = sim.step(&scene, c).unwrap();
        }
        assert!(scene.target().unwrap().grabbed);
        assert!(scene.arm.lift() > sim.cfg.lift_success);
    }

    #[test]
    fn push_demo_moves_target_right() {
        let (sim, traj) = run(Action::PushRight, 5);
        let mut scene = traj.initial.clone();
        for c in &traj.commands {
            scene = sim.step(&scene, c).unwrap();
        }
        let moved = scene.target().unwrap().position.0 - traj.target_start().0;
        assert!(moved >= sim.cfg.push_fraction * scene.table.width());
    }

    #[test]
    fn missing_target_is_reported() {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let task = TaskSpec::new(Action::PickUp, 0, 0, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = sim.empty_scene(&mut rng);
        let err = scripted_demo(&sim, &task, &scene, 0, 100, &DemoConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TargetMissing));
    }
}
