//! Deterministic planar-arm tabletop simulator.
//!
//! The arm is a serial planar chain rooted at the bottom edge of the table, plus a prismatic
//! lift and a binary-threshold gripper. A command is a `J`-vector laid out as
//! `[revolute joints.., lift, gripper]`; with the default five-link chain `J = 7`.
//! Grasping is a binary attach within a radius and pushing is kinematic displacement along
//! the contact normal; there are no dynamics.

pub mod expert;
pub mod kinematics;
pub mod render;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::task::{Action, TaskSpec};
pub use expert::{scripted_demo, DemoConfig, Expert, Trajectory};
pub use kinematics::{forward_kinematics, two_link_ik, Pose};
pub use render::{Frame, FrameKind, Palette};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= self.x0 && p.0 <= self.x1 && p.1 >= self.y0 && p.1 <= self.y1
    }

    pub fn clamp(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0.clamp(self.x0, self.x1), p.1.clamp(self.y0, self.y1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub link_lengths: Vec<f64>,
    /// Limits for every revolute joint followed by the lift.
    pub joint_limits: Vec<(f64, f64)>,
    pub base: (f64, f64),
    pub table: Rect,
    pub max_joint_delta: f64,
    pub max_lift_delta: f64,
    pub effector_radius: f64,
    pub object_radius: f64,
    pub grasp_radius: f64,
    /// Below this lift the effector touches objects on the table.
    pub contact_height: f64,
    pub lift_success: f64,
    pub lift_ticks: usize,
    pub push_fraction: f64,
    pub min_separation: f64,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub tick_hz: f64,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            link_lengths: vec![0.42, 0.25, 0.08, 0.06, 0.04],
            joint_limits: vec![(-0.6, 3.8), (-2.9, 2.9), (-0.6, 0.6), (-0.6, 0.6), (-0.6, 0.6), (0.0, 1.0)],
            base: (0.5, 0.0),
            table: Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 },
            max_joint_delta: 0.25,
            max_lift_delta: 0.25,
            effector_radius: 0.035,
            object_radius: 0.1,
            grasp_radius: 0.05,
            contact_height: 0.25,
            lift_success: 0.8,
            lift_ticks: 5,
            push_fraction: 0.2,
            min_separation: 0.27,
            n_shapes: 4,
            n_colors: 3,
            tick_hz: 10.0,
            max_steps: 600,
        }
    }
}

impl SimConfig {
    pub fn n_revolute(&self) -> usize {
        self.link_lengths.len()
    }

    /// Length of the command vector.
    pub fn command_dim(&self) -> usize {
        self.n_revolute() + 2
    }

    pub fn lift_index(&self) -> usize {
        self.n_revolute()
    }

    pub fn gripper_index(&self) -> usize {
        self.n_revolute() + 1
    }

    /// First link and the rigid remainder of the chain when the trailing joints sit at zero.
    pub fn effective_links(&self) -> (f64, f64) {
        (self.link_lengths[0], self.link_lengths[1..].iter().sum())
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.len() < 2 {
            bail!(Config, "need at least two links");
        }
        if self.joint_limits.len() != self.n_revolute() + 1 {
            bail!(Config, "expected {} joint limits, got {}", self.n_revolute() + 1, self.joint_limits.len());
        }
        if self.joint_limits.iter().any(|(lo, hi)| !(lo < hi)) {
            bail!(Config, "joint limits must satisfy lo < hi");
        }
        if self.n_shapes < 2 || self.n_colors < 2 {
            bail!(Config, "need at least two shapes and two colors");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    /// Revolute joint angles followed by the lift height.
    pub joints: Vec<f64>,
    /// 0 is open, 1 is closed; the gripper counts as closed at 0.5 and above.
    pub gripper: f64,
}

impl ArmState {
    pub fn command(&self) -> Vec<f64> {
        let mut c = self.joints.clone();
        c.push(self.gripper);
        c
    }

    pub fn lift(&self) -> f64 {
        *self.joints.last().unwrap()
    }

    pub fn closed(&self) -> bool {
        self.gripper >= 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape_id: usize,
    pub color_id: usize,
    pub position: (f64, f64),
    pub size: f64,
    pub is_target: bool,
    pub grabbed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub arm: ArmState,
    pub table: Rect,
}

impl Scene {
    pub fn target(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.is_target)
    }

    pub fn target_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.is_target)
    }

    pub fn grabbed_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.grabbed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sim {
    pub cfg: SimConfig,
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Effector pose in world coordinates.
    pub fn effector(&self, arm: &ArmState) -> Pose {
        let n = self.cfg.n_revolute();
        let p = forward_kinematics(&arm.joints[..n], &self.cfg.link_lengths).expect("arm state matches config");
        Pose { x: p.x + self.cfg.base.0, y: p.y + self.cfg.base.1, theta: p.theta }
    }

    /// World positions of the base, every joint and the effector.
    pub fn arm_points(&self, arm: &ArmState) -> Vec<(f64, f64)> {
        let n = self.cfg.n_revolute();
        kinematics::joint_positions(&arm.joints[..n], &self.cfg.link_lengths).into_iter().map(|(x, y)| (x + self.cfg.base.0, y + self.cfg.base.1)).collect()
    }

    pub fn clamp_joints(&self, joints: &mut [f64]) {
        for (q, &(lo, hi)) in joints.iter_mut().zip(&self.cfg.joint_limits) {
            *q = q.clamp(lo, hi);
        }
    }

    pub fn arm_from_command(&self, command: &[f64]) -> ArmState {
        let mut joints = command[..self.cfg.n_revolute() + 1].to_vec();
        self.clamp_joints(&mut joints);
        ArmState { joints, gripper: command[self.cfg.gripper_index()].clamp(0.0, 1.0) }
    }

    /// Advances one tick under `command`.
    pub fn step(&self, scene: &Scene, command: &[f64]) -> Result<Scene> {
        let cfg = &self.cfg;
        if command.len() != cfg.command_dim() {
            bail!(Dimension, "command of length {} for J = {}", command.len(), cfg.command_dim());
        }
        if let Some(v) = command.iter().find(|v| !v.is_finite()) {
            bail!(Input, "non-finite command entry {v}");
        }
        let n = cfg.n_revolute();
        let old = &scene.arm;
        let mut joints = Vec::with_capacity(n + 1);
        for (i, (&c, &q)) in command.iter().zip(&old.joints).enumerate().take(n + 1) {
            let limit = if i < n { cfg.max_joint_delta } else { cfg.max_lift_delta };
            joints.push(q + (c - q).clamp(-limit, limit));
        }
        self.clamp_joints(&mut joints);
        let new_arm = ArmState { joints, gripper: command[n + 1].clamp(0.0, 1.0) };

        let mut next = scene.clone();
        let p0 = self.effector(old);
        let p1 = self.effector(&new_arm);
        let (h0, h1) = (old.lift(), new_arm.lift());
        let travel = libm::hypot(p1.x - p0.x, p1.y - p0.y);
        let substeps = ((travel / 0.005) as usize).clamp(1, 200);
        let reach = cfg.effector_radius;
        let mut prev = (p0.x, p0.y);
        for s in 1..=substeps {
            let f = s as f64 / substeps as f64;
            let cur = (p0.x + (p1.x - p0.x) * f, p0.y + (p1.y - p0.y) * f);
            let h = h0 + (h1 - h0) * f;
            let motion = (cur.0 - prev.0, cur.1 - prev.1);
            for obj in next.objects.iter_mut() {
                if obj.grabbed {
                    obj.position = next.table.clamp(cur);
                    continue;
                }
                if old.closed() || h >= cfg.contact_height {
                    continue;
                }
                let d = (obj.position.0 - cur.0, obj.position.1 - cur.1);
                let dist = libm::hypot(d.0, d.1);
                let min = reach + obj.size;
                // an effector lowered onto an object rests on it; only one entering from outside pushes
                let before = libm::hypot(obj.position.0 - prev.0, obj.position.1 - prev.1);
                if dist < min && before >= min - 1e-9 {
                    let (ux, uy) = if dist > 1e-12 { (d.0 / dist, d.1 / dist) } else { unit(motion) };
                    obj.position = next.table.clamp((cur.0 + ux * min, cur.1 + uy * min));
                }
            }
            prev = cur;
        }

        let closing = !old.closed() && new_arm.closed();
        if closing && new_arm.lift() < cfg.contact_height {
            let eff = (p1.x, p1.y);
            let nearest = next
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| !o.grabbed)
                .map(|(i, o)| (i, libm::hypot(o.position.0 - eff.0, o.position.1 - eff.1)))
                .filter(|&(_, d)| d < cfg.grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = nearest {
                next.objects[i].grabbed = true;
            }
        } else if !new_arm.closed() {
            for o in next.objects.iter_mut() {
                o.grabbed = false;
            }
        }
        next.arm = new_arm;
        Ok(next)
    }

    /// Uniform joint configuration whose effector lands on the table.
    pub fn random_arm<R: Rng>(&self, rng: &mut R) -> ArmState {
        let cfg = &self.cfg;
        let (l1, l2) = self.cfg.effective_links();
        loop {
            let x = rng.gen_range(cfg.table.x0 + 0.08..cfg.table.x1 - 0.08);
            let y = rng.gen_range(cfg.table.y0 + 0.12..cfg.table.y1 - 0.08);
            let (rx, ry) = (x - cfg.base.0, y - cfg.base.1);
            let r = libm::hypot(rx, ry);
            if r < 0.2 || r > (l1 + l2) * 0.97 {
                continue;
            }
            let (q0, q1) = two_link_ik(rx, ry, l1, l2);
            let mut joints = vec![0.0; cfg.n_revolute() + 1];
            joints[0] = q0;
            joints[1] = q1;
            for q in joints[2..cfg.n_revolute()].iter_mut() {
                *q = rng.gen_range(-0.3..0.3);
            }
            joints[cfg.n_revolute()] = rng.gen_range(0.0..1.0);
            let mut clamped = joints.clone();
            self.clamp_joints(&mut clamped);
            if clamped != joints {
                continue;
            }
            let gripper = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
            return ArmState { joints, gripper };
        }
    }

    /// Resting pose used at the start of demonstrations and evaluation episodes.
    pub fn home_arm<R: Rng>(&self, rng: &mut R) -> ArmState {
        let cfg = &self.cfg;
        let (l1, l2) = cfg.effective_links();
        let x = cfg.base.0 + rng.gen_range(-0.25..0.25);
        let y = cfg.base.1 + rng.gen_range(0.3..0.45);
        let (q0, q1) = two_link_ik(x - cfg.base.0, y - cfg.base.1, l1, l2);
        let mut joints = vec![0.0; cfg.n_revolute() + 1];
        joints[0] = q0;
        joints[1] = q1;
        joints[cfg.n_revolute()] = 0.6;
        self.clamp_joints(&mut joints);
        ArmState { joints, gripper: 0.0 }
    }

    /// Region in which a target for `action` may spawn and still be manipulable.
    pub fn spawn_region(&self, action: Action) -> Rect {
        let t = &self.cfg.table;
        let margin = self.cfg.object_radius + 0.02;
        match action {
            Action::PickUp => Rect { x0: t.x0 + margin, y0: 0.3, x1: t.x1 - margin, y1: 0.78 },
            Action::PushRight => Rect { x0: t.x0 + margin + 0.08, y0: 0.3, x1: t.x1 - margin - self.cfg.push_fraction * t.width() - 0.05, y1: 0.72 },
        }
    }

    pub fn reachable(&self, p: (f64, f64)) -> bool {
        let (l1, l2) = self.cfg.effective_links();
        let r = libm::hypot(p.0 - self.cfg.base.0, p.1 - self.cfg.base.1);
        r > 0.22 && r < (l1 + l2) * 0.92
    }

    fn sample_point<R: Rng>(&self, rng: &mut R, region: &Rect, taken: &[(f64, f64)], tries: usize) -> Option<(f64, f64)> {
        for _ in 0..tries {
            let p = (rng.gen_range(region.x0..region.x1), rng.gen_range(region.y0..region.y1));
            if !self.reachable(p) {
                continue;
            }
            if taken.iter().all(|q| libm::hypot(p.0 - q.0, p.1 - q.1) >= self.cfg.min_separation) {
                return Some(p);
            }
        }
        None
    }

    /// Target for `task` plus `n_clutter` real objects whose (shape, color) never equals the target's.
    pub fn sample_scene<R: Rng>(&self, rng: &mut R, task: &TaskSpec, n_clutter: usize) -> Result<Scene> {
        let cfg = &self.cfg;
        let target_pos = self.sample_point(rng, &self.spawn_region(task.action), &[], 1000).ok_or_else(|| Error::Placement("no valid target position".into()))?;
        let mut objects = vec![SceneObject { shape_id: task.shape, color_id: task.color, position: target_pos, size: cfg.object_radius, is_target: true, grabbed: false }];
        let clutter_region = Rect { x0: cfg.table.x0 + 0.1, y0: 0.22, x1: cfg.table.x1 - 0.1, y1: 0.86 };
        for _ in 0..n_clutter {
            let taken: Vec<_> = objects.iter().map(|o| o.position).collect();
            let p = self.sample_point(rng, &clutter_region, &taken, 2000).ok_or_else(|| Error::Placement(format!("could not place {n_clutter} clutter objects")))?;
            let (shape_id, color_id) = loop {
                let s = rng.gen_range(0..cfg.n_shapes);
                let c = rng.gen_range(0..cfg.n_colors);
                if !task.same_object(s, c) {
                    break (s, c);
                }
            };
            objects.push(SceneObject { shape_id, color_id, position: p, size: cfg.object_radius, is_target: false, grabbed: false });
        }
        Ok(Scene { objects, arm: self.home_arm(rng), table: cfg.table })
    }

    /// Scene with only the arm, in a random configuration.
    pub fn empty_scene<R: Rng>(&self, rng: &mut R) -> Scene {
        Scene { objects: Vec::new(), arm: self.random_arm(rng), table: self.cfg.table }
    }

    /// `count` real objects with random identities and no designated target.
    pub fn real_clutter_scene<R: Rng>(&self, rng: &mut R, count: usize) -> Result<Scene> {
        let cfg = &self.cfg;
        let region = Rect { x0: cfg.table.x0 + 0.1, y0: 0.22, x1: cfg.table.x1 - 0.1, y1: 0.88 };
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        for _ in 0..count {
            let taken: Vec<_> = objects.iter().map(|o| o.position).collect();
            let p = self.sample_point(rng, &region, &taken, 4000).ok_or_else(|| Error::Placement(format!("could not place {count} objects")))?;
            objects.push(SceneObject {
                shape_id: rng.gen_range(0..cfg.n_shapes),
                color_id: rng.gen_range(0..cfg.n_colors),
                position: p,
                size: cfg.object_radius,
                is_target: false,
                grabbed: false,
            });
        }
        Ok(Scene { objects, arm: self.random_arm(rng), table: cfg.table })
    }
}

fn unit(v: (f64, f64)) -> (f64, f64) {
    let n = libm::hypot(v.0, v.1);
    if n > 1e-12 {
        (v.0 / n, v.1 / n)
    } else {
        (1.0, 0.0)
    }
}

/// Tracks the task success predicate over an episode.
///
/// Pick: target grabbed with the lift above threshold for a run of consecutive ticks.
/// Push: target displaced to the right by a fraction of the table width.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessTracker {
    pub action: Action,
    pub lifted_run: usize,
    pub origin_x: f64,
}

impl SuccessTracker {
    pub fn new(task: &TaskSpec, scene: &Scene) -> Result<Self> {
        let target = scene.target().ok_or(Error::TargetMissing)?;
        Ok(Self { action: task.action, lifted_run: 0, origin_x: target.position.0 })
    }

    /// Re-anchors the push reference after the target is moved externally.
    pub fn rebase(&mut self, scene: &Scene) {
        if let Some(t) = scene.target() {
            self.origin_x = t.position.0;
        }
        self.lifted_run = 0;
    }

    pub fn update(&mut self, cfg: &SimConfig, scene: &Scene) -> bool {
        let Some(target) = scene.target() else { return false };
        match self.action {
            Action::PickUp => {
                if target.grabbed && scene.arm.lift() > cfg.lift_success {
                    self.lifted_run += 1;
                } else {
                    self.lifted_run = 0;
                }
                self.lifted_run >= cfg.lift_ticks
            }
            Action::PushRight => target.position.0 - self.origin_x >= cfg.push_fraction * scene.table.width(),
        }
    }

    pub fn push_progress(&self, scene: &Scene) -> f64 {
        scene.target().map(|t| t.position.0 - self.origin_x).unwrap_or(0.0)
    }
}
