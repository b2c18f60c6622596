//! Generated datasets: on-disk layout, manifest, in-memory batches and the latent cache.
//!
//! Layout under the data root:
//! `trajectories/<id>/{frames/O_D_t.png, frames/O_DA_t.png, ticks.jsonl, meta.json}`,
//! `synthetic/<id>/{O_E,O_EA,O_EAC}.png`, `real_clutter/<id>.png`, `manifest.jsonl`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use asor_core::augment::{apply_placements, make_augmented_set, make_real_clutter, plan_augmentation, Placement, SourceKind, SpriteLibrary};
use asor_core::model::{Arch, Model};
use asor_core::nets::frames_tensor;
use asor_core::sim::render::render;
use asor_core::sim::{scripted_demo, Frame, FrameKind, Sim};
use asor_core::task::TaskSpec;
use asor_core::tensor::Tensor;
use asor_core::train::{PairBlock, SeqBatch, SeqInput, VisionBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, MixSection};
use crate::derive_seed;
use crate::error::{read, Error, Result};
use crate::io::{frame_name, load_png, read_json, read_jsonl, save_png, write_json, write_jsonl, write_trajectory, TaskRecord, Tick, TrajectoryMeta};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub sprite: usize,
    pub shape_id: usize,
    pub color_id: usize,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub angle: f64,
    pub is_clutter: bool,
}

impl PlacementRecord {
    pub fn from_placement(p: &Placement) -> Self {
        Self { sprite: p.sprite, shape_id: p.shape_id, color_id: p.color_id, x: p.position.0, y: p.position.1, scale: p.scale, angle: p.angle, is_clutter: p.is_clutter }
    }

    pub fn to_placement(&self) -> Placement {
        Placement {
            sprite: self.sprite,
            shape_id: self.shape_id,
            color_id: self.color_id,
            position: (self.x, self.y),
            scale: self.scale,
            angle: self.angle,
            is_clutter: self.is_clutter,
        }
    }
}

/// One frame of the dataset. `source_id` links a composited frame to the frame it was pasted onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub kind: String,
    pub frame_path: String,
    pub task: Option<TaskRecord>,
    pub placements: Vec<PlacementRecord>,
    pub source_id: Option<String>,
    pub seed: u64,
    pub split: Split,
    /// Trajectory id and tick for demonstration frames.
    pub trajectory: Option<String>,
    pub t: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    /// Reads `manifest.jsonl` under `root` and checks it against the files on disk: every record's frame
    /// must exist and every PNG must be referenced. A directory with neither yields an empty manifest.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let records: Vec<Record> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate record id {}", r.id)));
            }
            if FrameKind::from_tag(&r.kind).is_none() {
                return Err(Error::Integrity(format!("record {} has unknown kind {}", r.id, r.kind)));
            }
            if !root.join(&r.frame_path).is_file() {
                return Err(Error::Integrity(format!("record {} points at missing {}", r.id, r.frame_path)));
            }
        }
        let referenced: std::collections::BTreeSet<PathBuf> = records.iter().map(|r| PathBuf::from(&r.frame_path)).collect();
        for f in png_files(root)? {
            if !referenced.contains(&f) {
                return Err(Error::Integrity(format!("orphan frame {}", f.display())));
            }
        }
        Ok(Self { records })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_jsonl(&root.join(MANIFEST), &self.records)
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.kind.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn hash(&self) -> String {
        let mut h = sha2::Sha256::new();
        use sha2::Digest;
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("record serializes"));
        }
        hex::encode(h.finalize())
    }
}

/// PNG paths under `root`, relative and sorted.
fn png_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn split_of(index: usize, every: usize) -> Split {
    if every > 1 && index % every == every - 1 {
        Split::Val
    } else {
        Split::Train
    }
}

fn rel(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Target positions seen at every frame of a demonstration, replayed from its commands.
fn target_path(sim: &Sim, traj: &asor_core::sim::Trajectory) -> Result<Vec<(f64, f64)>> {
    let mut scene = traj.initial.clone();
    let mut out = Vec::with_capacity(traj.len() + 1);
    out.push(scene.target().ok_or(asor_core::Error::TargetMissing)?.position);
    for c in &traj.commands {
        scene = sim.step(&scene, c)?;
        out.push(scene.target().ok_or(asor_core::Error::TargetMissing)?.position);
    }
    Ok(out)
}

/// Demonstrations, augmented sets and real-clutter frames for every configured task, plus the manifest.
pub fn generate(cfg: &Config, root: &Path) -> Result<Manifest> {
    if root.join(MANIFEST).exists() {
        return Err(Error::Config(format!("{} already holds a dataset", root.display())));
    }
    let sim = Sim::new(cfg.sim())?;
    let res = cfg.data.resolution;
    let library = SpriteLibrary::build(&sim, res);
    let aug = cfg.augment();
    let demo_cfg = cfg.demo();
    let tasks = cfg.tasks()?;
    let mut records = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        let tr = TaskRecord::from_spec(task);
        for d in 0..cfg.data.demos_per_task {
            let seed = derive_seed(cfg.seed, &[1, ti as u64, d as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sim.sample_scene(&mut rng, task, 0)?;
            let traj = scripted_demo(&sim, task, &scene, seed, cfg.data.max_demo_steps, &demo_cfg)?;
            let plan = plan_augmentation(&sim, &SourceKind::Demo { target_path: target_path(&sim, &traj)? }, task, &library, &aug, &mut rng)?;
            let augmented: Vec<Frame> =
                traj.frames.iter().map(|f| Ok(apply_placements(f, &plan, &library, &sim.cfg.table)?.with_kind(FrameKind::DemoAug))).collect::<Result<_>>()?;
            let id = format!("demo_{}_{}_{}_{d:04}", task.action.name(), task.shape, task.color);
            let dir = PathBuf::from("trajectories").join(&id);
            let meta = TrajectoryMeta { id: id.clone(), task: tr.clone(), length: traj.len(), success: traj.success, initial: scene.arm.command(), seed };
            write_trajectory(&root.join(&dir), &traj, &meta, &[&augmented])?;
            let split = split_of(d, cfg.data.heldout_every);
            let placements: Vec<PlacementRecord> = plan.iter().map(PlacementRecord::from_placement).collect();
            for t in 0..traj.len() {
                let clean_id = format!("{id}/O_D/{t:06}");
                records.push(Record {
                    id: clean_id.clone(),
                    kind: FrameKind::Demo.tag().into(),
                    frame_path: rel(&dir.join("frames").join(frame_name(FrameKind::Demo, t))),
                    task: Some(tr.clone()),
                    placements: Vec::new(),
                    source_id: None,
                    seed,
                    split,
                    trajectory: Some(id.clone()),
                    t: Some(t),
                });
                records.push(Record {
                    id: format!("{id}/O_DA/{t:06}"),
                    kind: FrameKind::DemoAug.tag().into(),
                    frame_path: rel(&dir.join("frames").join(frame_name(FrameKind::DemoAug, t))),
                    task: Some(tr.clone()),
                    placements: placements.clone(),
                    source_id: Some(clean_id),
                    seed,
                    split,
                    trajectory: Some(id.clone()),
                    t: Some(t),
                });
            }
        }
        for s in 0..cfg.data.synthetic_per_task {
            let seed = derive_seed(cfg.seed, &[2, ti as u64, s as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sim.empty_scene(&mut rng);
            let empty = render(&sim, &scene, res, FrameKind::Empty)?;
            let set = make_augmented_set(&sim, &empty, &SourceKind::Empty, task, &library, &aug, &mut rng)?;
            let id = format!("synth_{}_{}_{}_{s:04}", task.action.name(), task.shape, task.color);
            let dir = PathBuf::from("synthetic").join(&id);
            let split = split_of(s, cfg.data.heldout_every);
            let frames = [(FrameKind::Empty, &set.o_e), (FrameKind::EmptyAug, &set.o_ea), (FrameKind::EmptyAugClutter, &set.o_eac)];
            let mut source: Option<String> = None;
            for (kind, frame) in frames {
                let frame = frame.as_ref().expect("empty source yields all three frames");
                let path = dir.join(format!("{}.png", kind.tag()));
                save_png(frame, &root.join(&path))?;
                let rid = format!("{id}/{}", kind.tag());
                let placements = match kind {
                    FrameKind::Empty => Vec::new(),
                    FrameKind::EmptyAug => set.placements.iter().filter(|p| !p.is_clutter).map(PlacementRecord::from_placement).collect(),
                    _ => set.placements.iter().map(PlacementRecord::from_placement).collect(),
                };
                records.push(Record {
                    id: rid.clone(),
                    kind: kind.tag().into(),
                    frame_path: rel(&path),
                    task: (kind != FrameKind::Empty).then(|| tr.clone()),
                    placements,
                    source_id: source.replace(rid),
                    seed,
                    split,
                    trajectory: None,
                    t: None,
                });
            }
        }
    }
    for r in 0..cfg.data.real_clutter {
        let seed = derive_seed(cfg.seed, &[3, r as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (frame, _) = make_real_clutter(&sim, &aug, res, &mut rng)?;
        let path = PathBuf::from("real_clutter").join(format!("rc_{r:05}.png"));
        save_png(&frame, &root.join(&path))?;
        records.push(Record {
            id: format!("rc_{r:05}"),
            kind: FrameKind::RealClutter.tag().into(),
            frame_path: rel(&path),
            task: None,
            placements: Vec::new(),
            source_id: None,
            seed,
            split: split_of(r, cfg.data.heldout_every),
            trajectory: None,
            t: None,
        });
    }
    let manifest = Manifest { records };
    manifest.save(root)?;
    write_json(&root.join("counts.json"), &manifest.counts())?;
    Ok(manifest)
}

/// A demonstration held in memory with its composited twin.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajData {
    pub id: String,
    pub task: TaskSpec,
    pub split: Split,
    pub clean: Vec<Frame>,
    pub augmented: Vec<Frame>,
    pub commands: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl TrajData {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn frame_id(&self, kind: FrameKind, t: usize) -> String {
        format!("{}/{}/{t:06}", self.id, kind.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub id: String,
    pub task: TaskSpec,
    pub split: Split,
    pub o_ea: Frame,
    pub o_eac: Frame,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealClutterData {
    pub id: String,
    pub split: Split,
    pub frame: Frame,
}

/// Everything a training run reads, decoded once.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub trajectories: Vec<TrajData>,
    pub synthetic: Vec<SynthData>,
    pub real_clutter: Vec<RealClutterData>,
}

/// Frame ids of one sampled batch, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BatchIds {
    pub demo: Vec<String>,
    pub synthetic: Vec<String>,
    pub real_clutter: Vec<String>,
    pub n_noise: usize,
    pub windows: Vec<String>,
}

fn to_tensor(frames: &[&Frame], res: usize) -> Result<Tensor<f32>> {
    Ok(frames_tensor(frames, res)?)
}

/// Tasks, previous commands, target commands and the step mask of a window batch.
type SeqParts = (Vec<TaskSpec>, Vec<Tensor<f32>>, Vec<Tensor<f32>>, Vec<Vec<f64>>);

impl Dataset {
    pub fn load(root: &Path, manifest: &Manifest, n_shapes: usize, n_colors: usize) -> Result<Self> {
        let mut trajectories = Vec::new();
        let mut synthetic = Vec::new();
        let mut real_clutter = Vec::new();
        let mut resolution = None;
        let mut check_res = |f: &Frame| -> Result<()> {
            match resolution {
                None => {
                    resolution = Some(f.width);
                    Ok(())
                }
                Some(r) if r == f.width && r == f.height => Ok(()),
                Some(r) => Err(Error::Integrity(format!("{}x{} frame in a {r} dataset", f.width, f.height))),
            }
        };
        let mut traj_ids: Vec<(&str, Split)> = Vec::new();
        for r in &manifest.records {
            if let (Some(tid), Some(0)) = (&r.trajectory, r.t) {
                if r.kind == FrameKind::Demo.tag() {
                    traj_ids.push((tid, r.split));
                }
            }
        }
        for (tid, split) in traj_ids {
            let dir = root.join("trajectories").join(tid);
            let meta: TrajectoryMeta = read_json(&dir.join("meta.json"))?;
            let ticks: Vec<Tick> = read_jsonl(&dir.join("ticks.jsonl"))?;
            let task = meta.task.to_spec(n_shapes, n_colors)?;
            let load = |kind| (0..meta.length).map(|t| load_png(&dir.join("frames").join(frame_name(kind, t)), kind)).collect::<Result<Vec<_>>>();
            let clean = load(FrameKind::Demo)?;
            let augmented = load(FrameKind::DemoAug)?;
            for f in clean.iter().chain(&augmented) {
                check_res(f)?;
            }
            if ticks.len() != meta.length {
                return Err(Error::Integrity(format!("{tid}: {} ticks for length {}", ticks.len(), meta.length)));
            }
            trajectories.push(TrajData { id: meta.id.clone(), task, split, clean, augmented, commands: ticks.into_iter().map(|t| t.joints).collect(), initial: meta.initial });
        }
        let by_id: BTreeMap<&str, &Record> = manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
        for r in &manifest.records {
            if r.kind == FrameKind::EmptyAugClutter.tag() {
                let src = r.source_id.as_deref().and_then(|s| by_id.get(s)).ok_or_else(|| Error::Integrity(format!("{} has no source", r.id)))?;
                let task = r.task.as_ref().ok_or_else(|| Error::Integrity(format!("{} has no task", r.id)))?.to_spec(n_shapes, n_colors)?;
                let o_ea = load_png(&root.join(&src.frame_path), FrameKind::EmptyAug)?;
                let o_eac = load_png(&root.join(&r.frame_path), FrameKind::EmptyAugClutter)?;
                check_res(&o_ea)?;
                check_res(&o_eac)?;
                let id = r.id.rsplit_once('/').map(|(a, _)| a.to_string()).unwrap_or_else(|| r.id.clone());
                synthetic.push(SynthData { id, task, split: r.split, o_ea, o_eac, placements: r.placements.iter().map(|p| p.to_placement()).collect() });
            } else if r.kind == FrameKind::RealClutter.tag() {
                let frame = load_png(&root.join(&r.frame_path), FrameKind::RealClutter)?;
                check_res(&frame)?;
                real_clutter.push(RealClutterData { id: r.id.clone(), split: r.split, frame });
            }
        }
        Ok(Self { resolution: resolution.unwrap_or(0), trajectories, synthetic, real_clutter })
    }

    fn frames_of(&self, split: Split) -> Vec<(usize, usize)> {
        self.trajectories.iter().enumerate().filter(|(_, tr)| tr.split == split).flat_map(|(i, tr)| (0..tr.len()).map(move |t| (i, t))).collect()
    }

    fn synth_of(&self, split: Split) -> Vec<usize> {
        (0..self.synthetic.len()).filter(|&i| self.synthetic[i].split == split).collect()
    }

    fn clutter_of(&self, split: Split) -> Vec<usize> {
        (0..self.real_clutter.len()).filter(|&i| self.real_clutter[i].split == split).collect()
    }

    pub fn trajectories_of(&self, split: Split) -> Vec<usize> {
        (0..self.trajectories.len()).filter(|&i| self.trajectories[i].split == split).collect()
    }

    /// Adversarial batch of `batch_size · Σmix` rows, each row's kind drawn in proportion to `mix`.
    /// Composited frames come with their clean sources. The baseline never sees composited frames.
    pub fn sample_vision_batch<R: Rng>(&self, mix: &MixSection, batch_size: usize, split: Split, arch: Arch, rng: &mut R) -> Result<(VisionBatch<f32>, BatchIds)> {
        let frames = self.frames_of(split);
        let synth = self.synth_of(split);
        let clutter = self.clutter_of(split);
        let baseline = arch == Arch::Baseline;
        let weights = [
            if frames.is_empty() { 0.0 } else { mix.demo },
            if baseline || synth.is_empty() { 0.0 } else { mix.synthetic },
            if baseline || clutter.is_empty() { 0.0 } else { mix.real_clutter },
            mix.noise,
        ];
        if weights[0] + weights[1] <= 0.0 {
            return Err(Error::Config(format!("no {split:?} frame pairs to sample")));
        }
        let total: f64 = weights.iter().sum();
        let rows = (batch_size as f64 * total).round().max(1.0) as usize;
        let mut counts = [0usize; 4];
        for _ in 0..rows {
            let mut u = rng.gen::<f64>() * total;
            let mut k = 0;
            while k < 3 && u >= weights[k] {
                u -= weights[k];
                k += 1;
            }
            counts[k] += 1;
        }
        if counts[0] + counts[1] == 0 {
            counts[if weights[0] > 0.0 { 0 } else { 1 }] += 1;
        }
        let mut ids = BatchIds { n_noise: counts[3], ..BatchIds::default() };
        let res = self.resolution;
        let demo = if counts[0] > 0 {
            let picks: Vec<(usize, usize)> = (0..counts[0]).map(|_| frames[rng.gen_range(0..frames.len())]).collect();
            let clean: Vec<&Frame> = picks.iter().map(|&(i, t)| &self.trajectories[i].clean[t]).collect();
            let aug: Vec<&Frame> = picks.iter().map(|&(i, t)| &self.trajectories[i].augmented[t]).collect();
            ids.demo = picks.iter().map(|&(i, t)| self.trajectories[i].frame_id(FrameKind::Demo, t)).collect();
            Some(PairBlock {
                clean: to_tensor(&clean, res)?,
                cluttered: (!baseline).then(|| to_tensor(&aug, res)).transpose()?,
                tasks: picks.iter().map(|&(i, _)| self.trajectories[i].task).collect(),
            })
        } else {
            None
        };
        let synth_block = if counts[1] > 0 {
            let picks: Vec<usize> = (0..counts[1]).map(|_| synth[rng.gen_range(0..synth.len())]).collect();
            let clean: Vec<&Frame> = picks.iter().map(|&i| &self.synthetic[i].o_ea).collect();
            let cl: Vec<&Frame> = picks.iter().map(|&i| &self.synthetic[i].o_eac).collect();
            ids.synthetic = picks.iter().map(|&i| self.synthetic[i].id.clone()).collect();
            Some(PairBlock { clean: to_tensor(&clean, res)?, cluttered: Some(to_tensor(&cl, res)?), tasks: picks.iter().map(|&i| self.synthetic[i].task).collect() })
        } else {
            None
        };
        let real_clutter = if counts[2] > 0 {
            let picks: Vec<usize> = (0..counts[2]).map(|_| clutter[rng.gen_range(0..clutter.len())]).collect();
            ids.real_clutter = picks.iter().map(|&i| self.real_clutter[i].id.clone()).collect();
            let f: Vec<&Frame> = picks.iter().map(|&i| &self.real_clutter[i].frame).collect();
            Some(to_tensor(&f, res)?)
        } else {
            None
        };
        Ok((VisionBatch { demo, synth: synth_block, real_clutter, n_noise: counts[3] }, ids))
    }

    /// Windows `(trajectory, start, augmented)` of length `len`; shorter trajectories are padded.
    fn windows<R: Rng>(&self, batch: usize, len: usize, split: Split, augmented_prob: f64, rng: &mut R) -> Result<Vec<(usize, usize, bool)>> {
        if len < 2 {
            return Err(Error::Config(format!("sequence length {len} must be at least 2")));
        }
        let trajs = self.trajectories_of(split);
        if trajs.is_empty() {
            return Err(Error::Config(format!("no {split:?} trajectories")));
        }
        Ok((0..batch)
            .map(|_| {
                let i = trajs[rng.gen_range(0..trajs.len())];
                let n = self.trajectories[i].len();
                let start = if n > len { rng.gen_range(0..=n - len) } else { 0 };
                let aug = augmented_prob > 0.0 && rng.gen::<f64>() < augmented_prob;
                (i, start, aug)
            })
            .collect())
    }

    fn seq_parts(&self, windows: &[(usize, usize, bool)], len: usize) -> SeqParts {
        let j = self.trajectories[windows[0].0].initial.len();
        let b = windows.len();
        let mut prev = vec![vec![0f32; b * j]; len];
        let mut targets = vec![vec![0f32; b * j]; len];
        let mut mask = vec![vec![0.0; b]; len];
        for (r, &(i, start, _)) in windows.iter().enumerate() {
            let tr = &self.trajectories[i];
            for s in 0..len {
                let t = start + s;
                if t >= tr.len() {
                    continue;
                }
                let p = if t == 0 { &tr.initial } else { &tr.commands[t - 1] };
                for k in 0..j {
                    prev[s][r * j + k] = p[k] as f32;
                    targets[s][r * j + k] = tr.commands[t][k] as f32;
                }
                mask[s][r] = 1.0;
            }
        }
        let tasks = windows.iter().map(|&(i, _, _)| self.trajectories[i].task).collect();
        let wrap = |v: Vec<Vec<f32>>| v.into_iter().map(|d| Tensor::new(&[b, j], d)).collect();
        (tasks, wrap(prev), wrap(targets), mask)
    }

    fn window_ids(&self, windows: &[(usize, usize, bool)]) -> Vec<String> {
        windows.iter().map(|&(i, s, a)| self.trajectories[i].frame_id(if a { FrameKind::DemoAug } else { FrameKind::Demo }, s)).collect()
    }

    /// Teacher-forced windows over frames: the command at step `t` is predicted from frame `t`.
    pub fn sample_sequence_batch<R: Rng>(&self, batch: usize, len: usize, split: Split, augmented_prob: f64, rng: &mut R) -> Result<(SeqBatch<f32>, Vec<String>)> {
        let windows = self.windows(batch, len, split, augmented_prob, rng)?;
        let (tasks, prev, targets, mask) = self.seq_parts(&windows, len);
        let mut frames = Vec::with_capacity(len);
        for s in 0..len {
            let f: Vec<&Frame> = windows
                .iter()
                .map(|&(i, start, aug)| {
                    let tr = &self.trajectories[i];
                    let t = (start + s).min(tr.len() - 1);
                    if aug {
                        &tr.augmented[t]
                    } else {
                        &tr.clean[t]
                    }
                })
                .collect();
            frames.push(to_tensor(&f, self.resolution)?);
        }
        let ids = self.window_ids(&windows);
        Ok((SeqBatch { input: SeqInput::Frames(frames), tasks, prev, targets, mask }, ids))
    }

    /// The same windows over cached latent means.
    pub fn sample_latent_batch<R: Rng>(
        &self,
        cache: &FeatureCache,
        batch: usize,
        len: usize,
        split: Split,
        augmented_prob: f64,
        rng: &mut R,
    ) -> Result<(SeqBatch<f32>, Vec<String>)> {
        let windows = self.windows(batch, len, split, augmented_prob, rng)?;
        let (tasks, prev, targets, mask) = self.seq_parts(&windows, len);
        let mut latents = Vec::with_capacity(len);
        for s in 0..len {
            let mut data = Vec::with_capacity(batch * cache.d_z);
            for &(i, start, aug) in &windows {
                let tr = &self.trajectories[i];
                let t = (start + s).min(tr.len() - 1);
                let id = tr.frame_id(if aug { FrameKind::DemoAug } else { FrameKind::Demo }, t);
                data.extend_from_slice(cache.get(&id).ok_or_else(|| Error::Provenance(format!("frame {id} is not in the feature cache")))?);
            }
            latents.push(Tensor::new(&[batch, cache.d_z], data));
        }
        let ids = self.window_ids(&windows);
        Ok((SeqBatch { input: SeqInput::Latents(latents), tasks, prev, targets, mask }, ids))
    }
}

/// Latent means of every demonstration frame under one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub checkpoint: String,
    pub d_z: usize,
    pub index: BTreeMap<String, usize>,
    pub rows: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    checkpoint: String,
    d_z: usize,
    rows: BTreeMap<String, usize>,
}

const CHUNK: usize = 32;

impl FeatureCache {
    /// Encodes every clean and composited demonstration frame with `model`.
    pub fn compute(model: &Model<f32>, data: &Dataset, checkpoint: &str) -> Result<Self> {
        let d_z = model.vision.d_z;
        let mut index = BTreeMap::new();
        let mut rows = Vec::new();
        for tr in &data.trajectories {
            for (kind, frames) in [(FrameKind::Demo, &tr.clean), (FrameKind::DemoAug, &tr.augmented)] {
                for (c, chunk) in frames.chunks(CHUNK).enumerate() {
                    let refs: Vec<&Frame> = chunk.iter().collect();
                    let tasks = vec![tr.task; chunk.len()];
                    for (k, mu) in model.latent_means(&refs, &tasks)?.into_iter().enumerate() {
                        index.insert(tr.frame_id(kind, c * CHUNK + k), rows.len() / d_z);
                        rows.extend(mu.into_iter().map(|v| v as f32));
                    }
                }
            }
        }
        Ok(Self { checkpoint: checkpoint.to_string(), d_z, index, rows })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&r| &self.rows[r * self.d_z..(r + 1) * self.d_z])
    }

    /// `<stem>.bin` (little-endian f32 rows) and `<stem>.json` (index and producing checkpoint).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.rows.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::error::write(&stem.with_extension("bin"), bytes)?;
        write_json(&stem.with_extension("json"), &CacheIndex { checkpoint: self.checkpoint.clone(), d_z: self.d_z, rows: self.index.clone() })
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let idx: CacheIndex = read_json(&stem.with_extension("json"))?;
        let bytes = read(&stem.with_extension("bin"))?;
        if bytes.len() != idx.rows.len() * idx.d_z * 4 {
            return Err(Error::format("feature cache", format!("{} bytes for {} rows of {}", bytes.len(), idx.rows.len(), idx.d_z)));
        }
        let rows = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { checkpoint: idx.checkpoint, d_z: idx.d_z, index: idx.rows, rows })
    }

    /// Every cached id must name a demonstration frame of `manifest`.
    pub fn check_against(&self, manifest: &Manifest) -> Result<()> {
        let ids: std::collections::BTreeSet<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
        match self.index.keys().find(|k| !ids.contains(k.as_str())) {
            Some(k) => Err(Error::Provenance(format!("cached frame {k} is not in the manifest"))),
            None => Ok(()),
        }
    }
}
