//! Compositing invariants over generated augmented sets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use asor_core::augment::{augment_with_plan, make_augmented_set, plan_augmentation, sample_clutter, AugmentConfig, AugmentedSet, Placement, SourceKind, SpriteLibrary};
use asor_core::sim::render::render;
use asor_core::sim::{scripted_demo, DemoConfig, Frame, FrameKind, Sim, SimConfig, Trajectory};
use asor_core::task::TaskSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SETS: usize = 1000;
pub const RES: usize = 64;

pub struct Fixture {
    pub sim: Sim,
    pub library: SpriteLibrary,
    pub cfg: AugmentConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Fixture {
    pub fn new() -> Self {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let library = SpriteLibrary::build(&sim, RES);
        Self { sim, library, cfg: AugmentConfig::default(), tasks: TaskSpec::grid(4, 3) }
    }
}

/// Where the real target sits at every tick of a replayed demonstration.
pub fn target_path(sim: &Sim, traj: &Trajectory) -> Vec<(f64, f64)> {
    let mut scene = traj.initial.clone();
    let mut out = vec![scene.target().unwrap().position];
    for c in &traj.commands {
        scene = sim.step(&scene, c).unwrap();
        out.push(scene.target().unwrap().position);
    }
    out
}

/// One generated case: the source frames, the set built from the middle frame and the keep-out points.
pub struct Case {
    pub source: SourceKind,
    pub frames: Vec<Frame>,
    pub set: AugmentedSet,
    pub keep_out: Vec<(f64, f64)>,
    pub task: TaskSpec,
}

/// Even indices augment a demonstration, odd ones an empty scene.
pub fn generate(fx: &Fixture, i: usize) -> Case {
    let task = fx.tasks[i % fx.tasks.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    if i % 2 == 0 {
        let scene = fx.sim.sample_scene(&mut rng, &task, 0).unwrap();
        let traj = scripted_demo(&fx.sim, &task, &scene, i as u64, 80, &DemoConfig::default()).unwrap();
        let path = target_path(&fx.sim, &traj);
        let source = SourceKind::Demo { target_path: path.clone() };
        let plan = plan_augmentation(&fx.sim, &source, &task, &fx.library, &fx.cfg, &mut rng).unwrap();
        let mid = &traj.frames[traj.frames.len() / 2];
        let set = augment_with_plan(mid, &source, &task, &plan, &fx.library, &fx.sim.cfg.table).unwrap();
        Case { source, frames: traj.frames, set, keep_out: path, task }
    } else {
        let scene = fx.sim.empty_scene(&mut rng);
        let empty = render(&fx.sim, &scene, RES, FrameKind::Empty).unwrap();
        let set = make_augmented_set(&fx.sim, &empty, &SourceKind::Empty, &task, &fx.library, &fx.cfg, &mut rng).unwrap();
        let keep_out = set.placements.iter().filter(|p| !p.is_clutter).map(|p| p.position).collect();
        Case { source: SourceKind::Empty, frames: vec![empty], set, keep_out, task }
    }
}

fn clutter_support(fx: &Fixture, placements: &[Placement]) -> BTreeSet<usize> {
    placements.iter().filter(|p| p.is_clutter).flat_map(|p| p.support(&fx.library, &fx.sim.cfg.table, RES, RES)).collect()
}

fn diff_outside(a: &Frame, b: &Frame, allowed: &BTreeSet<usize>) -> usize {
    a.diff_support(b).into_iter().filter(|i| !allowed.contains(i)).count()
}

/// Violation descriptions for one case; empty when every invariant holds.
pub fn violations(fx: &Fixture, case: &Case) -> Vec<String> {
    let mut out = Vec::new();
    let set = &case.set;
    let allowed = clutter_support(fx, &set.placements);
    let clutter: Vec<&Placement> = set.placements.iter().filter(|p| p.is_clutter).collect();
    match &case.source {
        SourceKind::Demo { .. } => {
            let (o_d, o_da) = (set.o_d.as_ref().unwrap(), set.o_da.as_ref().unwrap());
            let n = diff_outside(o_d, o_da, &allowed);
            if n > 0 {
                out.push(format!("o_da differs from o_d at {n} pixels outside clutter"));
            }
            if set.placements.iter().any(|p| !p.is_clutter) {
                out.push("demo plan pastes a synthetic target".into());
            }
            for f in &case.frames {
                let aug = asor_core::augment::apply_placements(f, &set.placements, &fx.library, &fx.sim.cfg.table).unwrap();
                let n = diff_outside(f, &aug, &allowed);
                if n > 0 {
                    out.push(format!("trajectory frame differs at {n} pixels outside clutter"));
                }
            }
        }
        SourceKind::Empty => {
            let (o_ea, o_eac) = (set.o_ea.as_ref().unwrap(), set.o_eac.as_ref().unwrap());
            let n = diff_outside(o_ea, o_eac, &allowed);
            if n > 0 {
                out.push(format!("o_eac differs from o_ea at {n} pixels outside clutter"));
            }
            let targets: Vec<&Placement> = set.placements.iter().filter(|p| !p.is_clutter).collect();
            if targets.len() != 1 || targets[0].shape_id != case.task.shape || targets[0].color_id != case.task.color {
                out.push("o_ea target sprite does not carry the task object".into());
            }
            let s = &fx.library.sprites[targets[0].sprite];
            if (s.shape_id, s.color_id) != (case.task.shape, case.task.color) {
                out.push("target placement points at the wrong sprite".into());
            }
        }
    }
    if clutter.len() < fx.cfg.clutter_min || clutter.len() > fx.cfg.clutter_max {
        out.push(format!("{} clutter sprites", clutter.len()));
    }
    for (k, p) in clutter.iter().enumerate() {
        let s = &fx.library.sprites[p.sprite];
        if case.task.same_object(s.shape_id, s.color_id) || case.task.same_object(p.shape_id, p.color_id) {
            out.push("clutter reproduces the target object".into());
        }
        let near = |q: (f64, f64)| (p.position.0 - q.0).hypot(p.position.1 - q.1) < fx.cfg.min_separation;
        if case.keep_out.iter().any(|&q| near(q)) {
            out.push("clutter inside the target keep-out".into());
        }
        if clutter[..k].iter().any(|q| near(q.position)) {
            out.push("clutter sprites closer than the minimum separation".into());
        }
    }
    out
}

/// One-line verdict: invariants over `SETS` cases plus bit-identical regeneration.
pub fn check() -> Result<String, String> {
    let fx = Fixture::new();
    let mut bad = Vec::new();
    let mut regen_mismatch = 0;
    for i in 0..SETS {
        let case = generate(&fx, i);
        let v = violations(&fx, &case);
        if !v.is_empty() {
            bad.push(format!("set {i}: {}", v.join("; ")));
        }
        if i % 10 == 0 && generate(&fx, i).set != case.set {
            regen_mismatch += 1;
        }
    }
    let detail = format!("{SETS} sets, {} with violations, {} of {} regenerations differ", bad.len(), regen_mismatch, SETS.div_ceil(10));
    if bad.is_empty() && regen_mismatch == 0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", bad.first().cloned().unwrap_or_default()))
    }
}

/// Per-sprite draw counts of single clutter placements for `task` over `n` seeded draws.
pub fn clutter_counts(fx: &Fixture, task: &TaskSpec, n: usize) -> Vec<usize> {
    let mut counts = vec![0; fx.library.sprites.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..n {
        let p = sample_clutter(&fx.library, task, 1, &[], &fx.cfg, &mut rng).unwrap();
        counts[p[0].sprite] += 1;
    }
    counts
}
