//! PNG frames and trajectory directories.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use asor_core::sim::{Frame, FrameKind, Trajectory};
use asor_core::task::{Action, TaskSpec};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{create_dir, read, Error, Result};

pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let img = RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.data.clone()).ok_or_else(|| Error::format("frame", "pixel buffer does not match its size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::format("png", e))?;
    Ok(out.into_inner())
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    crate::error::write(path, encode_png(frame)?)
}

pub fn load_png(path: &Path, kind: FrameKind) -> Result<Frame> {
    let bytes = read(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::format(path.display().to_string(), e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Frame::from_data(w, h, kind, img.into_raw())?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub action: String,
    pub shape_id: usize,
    pub color_id: usize,
}

impl TaskRecord {
    pub fn from_spec(t: &TaskSpec) -> Self {
        Self { action: t.action.name().to_string(), shape_id: t.shape, color_id: t.color }
    }

    pub fn to_spec(&self, n_shapes: usize, n_colors: usize) -> Result<TaskSpec> {
        Ok(TaskSpec::new(Action::parse(&self.action)?, self.shape_id, self.color_id, n_shapes, n_colors)?)
    }
}

/// One line of `ticks.jsonl`: the command sent after observing frame `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: usize,
    pub joints: Vec<f64>,
    pub gripper: f64,
    pub task: TaskRecord,
}

/// `meta.json` beside the ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub id: String,
    pub task: TaskRecord,
    pub length: usize,
    pub success: bool,
    /// Arm command before the first tick.
    pub initial: Vec<f64>,
    pub seed: u64,
}

pub fn frame_name(kind: FrameKind, t: usize) -> String {
    format!("{}_{t:06}.png", kind.tag())
}

pub fn ticks_from(traj: &Trajectory) -> Vec<Tick> {
    let task = TaskRecord::from_spec(&traj.task);
    traj.commands.iter().enumerate().map(|(t, c)| Tick { t, joints: c.clone(), gripper: *c.last().unwrap_or(&0.0), task: task.clone() }).collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format("jsonl", e))?;
        buf.push(b'\n');
    }
    crate::error::write(path, buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

/// Appends one JSON line, creating the file if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(row).map_err(|e| Error::format("jsonl", e))?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::format("json", e))?;
    s.push(b'\n');
    crate::error::write(path, s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path.display().to_string(), e))
}

/// Writes `frames/` (each extra kind alongside the clean frames), `ticks.jsonl` and `meta.json`.
pub fn write_trajectory(dir: &Path, traj: &Trajectory, meta: &TrajectoryMeta, extra: &[&[Frame]]) -> Result<()> {
    for (t, f) in traj.frames.iter().enumerate() {
        save_png(f, &dir.join("frames").join(frame_name(f.kind, t)))?;
    }
    for frames in extra {
        for (t, f) in frames.iter().enumerate() {
            save_png(f, &dir.join("frames").join(frame_name(f.kind, t)))?;
        }
    }
    write_jsonl(&dir.join("ticks.jsonl"), &ticks_from(traj))?;
    write_json(&dir.join("meta.json"), meta)
}

/// Frames of one kind plus the tick records.
pub fn read_trajectory(dir: &Path, kind: FrameKind) -> Result<(TrajectoryMeta, Vec<Frame>, Vec<Tick>)> {
    let meta: TrajectoryMeta = read_json(&dir.join("meta.json"))?;
    let ticks: Vec<Tick> = read_jsonl(&dir.join("ticks.jsonl"))?;
    if ticks.len() != meta.length {
        return Err(Error::format(dir.display().to_string(), format!("{} ticks for length {}", ticks.len(), meta.length)));
    }
    let frames = (0..meta.length).map(|t| load_png(&dir.join("frames").join(frame_name(kind, t)), kind)).collect::<Result<_>>()?;
    Ok((meta, frames, ticks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use asor_core::sim::{scripted_demo, DemoConfig, Sim, SimConfig};
    use rand::SeedableRng;

    #[test]
    fn png_round_trip() {
        let f = Frame::from_data(4, 2, FrameKind::DemoAug, (0..24).map(|i| (i * 10) as u8).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&f, &p).unwrap();
        assert_eq!(load_png(&p, FrameKind::DemoAug).unwrap(), f);
    }

    #[test]
    fn trajectory_round_trip() {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let task = TaskSpec::new(Action::PickUp, 0, 1, 4, 3).unwrap();
        let scene = sim.sample_scene(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3), &task, 0).unwrap();
        let cfg = DemoConfig { resolution: 32, ..DemoConfig::default() };
        let traj = scripted_demo(&sim, &task, &scene, 3, 200, &cfg).unwrap();
        let meta = TrajectoryMeta { id: "t0".into(), task: TaskRecord::from_spec(&task), length: traj.len(), success: traj.success, initial: scene.arm.command(), seed: 3 };
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(dir.path(), &traj, &meta, &[]).unwrap();
        let (m, frames, ticks) = read_trajectory(dir.path(), FrameKind::Demo).unwrap();
        assert_eq!(m, meta);
        assert_eq!(frames, traj.frames);
        assert_eq!(ticks.len(), traj.len());
        for (tick, cmd) in ticks.iter().zip(&traj.commands) {
            assert_eq!(&tick.joints, cmd);
            assert_eq!(tick.task.to_spec(4, 3).unwrap(), task);
        }
    }

    #[test]
    fn missing_png_is_missing() {
        let e = load_png(Path::new("/nonexistent/x.png"), FrameKind::Demo).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }
}
