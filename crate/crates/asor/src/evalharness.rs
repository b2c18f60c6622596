//! Closed-loop success tables, the disturbance test and held-out vision metrics.

use std::path::Path;

use asor_core::augment::SpriteLibrary;
use asor_core::model::{Arch, Model};
use asor_core::policy::{rollout, Disturbance, EpisodeResult, Policy, RolloutConfig};
use asor_core::sim::{Frame, Sim};
use asor_core::task::{Action, TaskSpec, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{Dataset, Split};
use crate::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    NoClutter,
    Clutter,
    Disturbance,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::NoClutter, Condition::Clutter, Condition::Disturbance];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::NoClutter => "no_clutter",
            Condition::Clutter => "clutter",
            Condition::Disturbance => "disturbance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.tag() == s).ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// One CSV row: a task (or an `all…` aggregate) under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub task: String,
    pub condition: String,
    pub trials: usize,
    pub successes: usize,
    pub pct: f64,
    pub seed_list: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuccessTable {
    pub rows: Vec<Row>,
}

fn pct(successes: usize, trials: usize) -> f64 {
    if trials == 0 {
        0.0
    } else {
        100.0 * successes as f64 / trials as f64
    }
}

impl SuccessTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format("csv", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("csv", e))?;
        crate::error::write(path, bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bytes = crate::error::read(path)?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let rows = r.deserialize().collect::<std::result::Result<Vec<Row>, _>>().map_err(|e| Error::format(path.display().to_string(), e))?;
        Ok(Self { rows })
    }

    pub fn get(&self, task: &str, condition: Condition) -> Option<&Row> {
        self.rows.iter().find(|r| r.task == task && r.condition == condition.tag())
    }

    /// The overall row of a condition.
    pub fn overall(&self, condition: Condition) -> Option<&Row> {
        self.get("all", condition)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Episodes per task and seed.
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub clutter: (usize, usize),
    pub resolution: usize,
    pub disturbance: Disturbance,
    pub disturbance_clutter: bool,
}

impl EvalSettings {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            trials: cfg.eval.trials,
            seeds: cfg.eval.seeds.clone(),
            max_steps: cfg.eval.max_steps,
            clutter: (cfg.eval.clutter_min, cfg.eval.clutter_max),
            resolution: cfg.data.resolution,
            disturbance: Disturbance { fraction: cfg.eval.disturbance_fraction, ..Disturbance::default() },
            disturbance_clutter: cfg.eval.disturbance_clutter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: String,
    pub condition: String,
    pub seed: u64,
    pub trial: usize,
    pub success: bool,
    pub steps: usize,
    pub min_distance: f64,
    pub disturbed: bool,
    pub recovered: bool,
}

pub fn task_name(t: &TaskSpec) -> String {
    let v = Vocab::default();
    match (v.colors.get(t.color), v.shapes.get(t.shape)) {
        (Some(c), Some(s)) => format!("{}:{c}:{s}", t.action.name()),
        _ => format!("{}:{}:{}", t.action.name(), t.color, t.shape),
    }
}

/// Runs `trials × seeds` episodes per task under `condition`. Each episode's scene and policy noise
/// come from a seed derived from (seed, condition, task, trial). Rows: one per task, one per action
/// present, then `all`; in the disturbance condition a success is a recovery.
pub fn evaluate(
    policy: &mut dyn Policy,
    sim: &Sim,
    tasks: &[TaskSpec],
    condition: Condition,
    s: &EvalSettings,
    checkpoint_hash: &str,
) -> Result<(SuccessTable, Vec<EpisodeRecord>)> {
    if s.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if s.seeds.is_empty() || tasks.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed and one task".into()));
    }
    if condition == Condition::Disturbance && !tasks.iter().any(|t| t.action == Action::PickUp) {
        return Err(Error::Config("the disturbance test needs a pick task".into()));
    }
    let seed_list = s.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
    let mut episodes = Vec::new();
    let mut counts = Vec::with_capacity(tasks.len());
    for (ti, task) in tasks.iter().enumerate() {
        let mut ok = 0;
        for &seed in &s.seeds {
            for trial in 0..s.trials {
                let ep_seed = derive_seed(seed, &[condition.index(), ti as u64, trial as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
                let clutter = match condition {
                    Condition::NoClutter => false,
                    Condition::Clutter => true,
                    Condition::Disturbance => s.disturbance_clutter,
                };
                let n = if clutter { rng.gen_range(s.clutter.0..=s.clutter.1) } else { 0 };
                let scene = sim.sample_scene(&mut rng, task, n)?;
                let rc = RolloutConfig { max_steps: s.max_steps, resolution: s.resolution, disturbance: (condition == Condition::Disturbance).then_some(s.disturbance) };
                let r: EpisodeResult = rollout(policy, sim, task, &scene, ep_seed, &rc)?;
                let success = if condition == Condition::Disturbance { r.recovered } else { r.success };
                ok += success as usize;
                episodes.push(EpisodeRecord {
                    task: task_name(task),
                    condition: condition.tag().into(),
                    seed,
                    trial,
                    success: r.success,
                    steps: r.steps,
                    min_distance: r.min_distance,
                    disturbed: r.disturbed,
                    recovered: r.recovered,
                });
            }
        }
        counts.push((task, s.trials * s.seeds.len(), ok));
    }
    let row = |task: String, trials: usize, successes: usize| Row {
        task,
        condition: condition.tag().into(),
        trials,
        successes,
        pct: pct(successes, trials),
        seed_list: seed_list.clone(),
        checkpoint_hash: checkpoint_hash.into(),
    };
    let mut rows: Vec<Row> = counts.iter().map(|(t, n, k)| row(task_name(t), *n, *k)).collect();
    for action in Action::ALL {
        let sel: Vec<_> = counts.iter().filter(|(t, _, _)| t.action == action).collect();
        if !sel.is_empty() {
            rows.push(row(format!("all:{}", action.name()), sel.iter().map(|c| c.1).sum(), sel.iter().map(|c| c.2).sum()));
        }
    }
    rows.push(row("all".into(), counts.iter().map(|c| c.1).sum(), counts.iter().map(|c| c.2).sum()));
    Ok((SuccessTable { rows }, episodes))
}

/// Held-out vision diagnostics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionMetrics {
    pub arch: String,
    pub disc_frames: usize,
    pub disc_shape_acc: f64,
    pub disc_color_acc: f64,
    /// Both heads right on the same frame.
    pub disc_joint_acc: f64,
    /// Real frames on which either head's top class is fake.
    #[serde(default)]
    pub disc_called_fake: f64,
    pub rec_pairs: usize,
    /// Fraction of pairs whose reconstruction of the cluttered frame is closer to the clean frame.
    pub rec_closer_to_clean: f64,
    pub attention_frames: usize,
    pub attention_argmax_in_target: Option<f64>,
    pub attention_median_iou: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mse(a: &Frame, b: &Frame) -> f64 {
    a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data.len() as f64
}

/// Grid cells touched by `pixels` (row-major indices into a `res × res` frame).
pub fn cells_of(pixels: &[usize], res: usize, grid: usize) -> Vec<usize> {
    let side = res / grid;
    let mut cells: Vec<usize> = pixels.iter().map(|&p| (p / res / side) * grid + (p % res) / side).collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

const CHUNK: usize = 16;

/// Discriminator accuracy on held-out real frames, reconstruction preference on held-out composited
/// pairs and, for EA, attention placement against the pasted target.
pub fn vision_metrics(model: &Model<f32>, data: &Dataset, sim: &Sim, max_frames: usize) -> Result<VisionMetrics> {
    let synth: Vec<_> = data.synthetic.iter().filter(|s| s.split == Split::Val).take(max_frames).collect();
    let mut real: Vec<(&Frame, TaskSpec)> = synth.iter().map(|s| (&s.o_ea, s.task)).collect();
    for tr in data.trajectories.iter().filter(|t| t.split == Split::Val) {
        let step = (tr.len() / 4).max(1);
        real.extend(tr.clean.iter().step_by(step).map(|f| (f, tr.task)));
    }
    real.truncate(2 * max_frames);
    let (mut shape_ok, mut color_ok, mut joint_ok, mut fake) = (0usize, 0usize, 0usize, 0usize);
    for chunk in real.chunks(CHUNK) {
        let frames: Vec<&Frame> = chunk.iter().map(|c| c.0).collect();
        for (out, (_, task)) in model.discriminate(&frames)?.iter().zip(chunk) {
            let s = argmax(&out.shape_logits) == task.shape;
            let c = argmax(&out.color_logits) == task.color;
            shape_ok += s as usize;
            color_ok += c as usize;
            joint_ok += (s && c) as usize;
            fake += (argmax(&out.shape_logits) == out.shape_logits.len() - 1 || argmax(&out.color_logits) == out.color_logits.len() - 1) as usize;
        }
    }
    let n_real = real.len().max(1) as f64;
    let mut closer = 0usize;
    for chunk in synth.chunks(CHUNK) {
        let frames: Vec<&Frame> = chunk.iter().map(|s| &s.o_eac).collect();
        let tasks: Vec<TaskSpec> = chunk.iter().map(|s| s.task).collect();
        for (rec, s) in model.reconstruct(&frames, &tasks)?.iter().zip(chunk) {
            closer += (mse(&rec.o_rec, &s.o_ea) < mse(&rec.o_rec, &s.o_eac)) as usize;
        }
    }
    let (mut inside, mut ious) = (0usize, Vec::new());
    if model.arch == Arch::Ea {
        let library = SpriteLibrary::build(sim, data.resolution);
        let res = data.resolution;
        for chunk in synth.chunks(CHUNK) {
            let frames: Vec<&Frame> = chunk.iter().map(|s| &s.o_eac).collect();
            let tasks: Vec<TaskSpec> = chunk.iter().map(|s| s.task).collect();
            for (map, s) in model.attention_maps(&frames, &tasks)?.iter().zip(chunk) {
                let target = s.placements.iter().find(|p| !p.is_clutter).ok_or_else(|| Error::Integrity(format!("{} has no target placement", s.id)))?;
                let cells = cells_of(&target.support(&library, &sim.cfg.table, res, res), res, map.k_h);
                inside += cells.contains(&map.argmax()) as usize;
                let active: Vec<usize> = (0..map.k()).filter(|&k| map.p_tfa[k] > 0.0).collect();
                ious.push(iou(&active, &cells));
            }
        }
    }
    let n_synth = synth.len().max(1) as f64;
    Ok(VisionMetrics {
        arch: model.arch.tag().into(),
        disc_frames: real.len(),
        disc_shape_acc: shape_ok as f64 / n_real,
        disc_color_acc: color_ok as f64 / n_real,
        disc_joint_acc: joint_ok as f64 / n_real,
        disc_called_fake: fake as f64 / n_real,
        rec_pairs: synth.len(),
        rec_closer_to_clean: closer as f64 / n_synth,
        attention_frames: ious.len(),
        attention_argmax_in_target: (model.arch == Arch::Ea).then(|| inside as f64 / n_synth),
        attention_median_iou: median(&mut ious),
    })
}
