//! TOML run configuration. Every key has a default; flags override file values.

use std::path::Path;

use asor_core::augment::AugmentConfig;
use asor_core::model::Arch;
use asor_core::motor::MotorConfig;
use asor_core::nets::VisionConfig;
use asor_core::sim::{DemoConfig, SimConfig};
use asor_core::task::{Action, TaskSpec, Vocab};
use asor_core::train::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_string, Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Demonstrations per task.
    pub demos_per_task: usize,
    /// Tasks as `action:color:shape`; empty means every action over every object.
    pub tasks: Vec<String>,
    /// Empty-scene augmented sets per task.
    pub synthetic_per_task: usize,
    pub real_clutter: usize,
    /// Every n-th demonstration (and synthetic set) of a task is held out.
    pub heldout_every: usize,
    pub resolution: usize,
    pub max_demo_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { demos_per_task: 50, tasks: Vec::new(), synthetic_per_task: 50, real_clutter: 200, heldout_every: 10, resolution: 64, max_demo_steps: 600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub scale_jitter: f64,
    pub rotation_jitter_deg: f64,
    pub min_separation: f64,
    pub real_clutter_min: usize,
    pub real_clutter_max: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        Self {
            clutter_min: a.clutter_min,
            clutter_max: a.clutter_max,
            scale_jitter: a.scale_jitter,
            rotation_jitter_deg: a.rotation_jitter.to_degrees(),
            min_separation: a.min_separation,
            real_clutter_min: a.real_clutter_min,
            real_clutter_max: a.real_clutter_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub d_z: usize,
    pub d_f: usize,
    pub task_channels: usize,
    pub fusion_block: usize,
    pub grid: usize,
    pub attention_channels: Vec<usize>,
    pub d_phi: usize,
    pub d_psi: usize,
    pub head_hidden: usize,
    pub threshold: f64,
    /// Momentum of a running-average attention threshold; absent keeps the threshold fixed.
    pub running_threshold: Option<f64>,
    pub hidden: usize,
    pub layers: usize,
    pub components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let v = VisionConfig::default();
        let m = MotorConfig::default();
        Self {
            channels: v.channels,
            d_z: v.d_z,
            d_f: v.d_f,
            task_channels: v.task_channels,
            fusion_block: v.fusion_block,
            grid: v.grid,
            attention_channels: v.attention_channels,
            d_phi: v.d_phi,
            d_psi: v.d_psi,
            head_hidden: v.head_hidden,
            threshold: v.threshold,
            running_threshold: None,
            hidden: m.hidden,
            layers: m.layers,
            components: m.components,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub gd: f64,
    pub rec: f64,
    pub fea: f64,
    pub prior: f64,
    pub motor: f64,
    pub attention: f64,
    pub mrec: f64,
    pub sparsity: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { gd: w.gd, rec: w.rec, fea: w.fea, prior: w.prior, motor: w.motor, attention: w.attention, mrec: w.mrec, sparsity: w.sparsity }
    }
}

/// Rows of each frame kind per vision batch, as multiples of `batch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub demo: f64,
    pub synthetic: f64,
    pub real_clutter: f64,
    pub noise: f64,
    /// Probability that a controller window reads augmented instead of clean demo frames.
    pub augmented_windows: f64,
}

impl Default for MixSection {
    fn default() -> Self {
        Self { demo: 1.0, synthetic: 1.0, real_clutter: 0.5, noise: 0.5, augmented_windows: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: String,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lr_motor: f64,
    pub batch_size: usize,
    pub seq_batch: usize,
    pub seq_len_phase1: usize,
    pub seq_len_phase2: usize,
    pub steps_phase1: u64,
    pub steps_phase2: u64,
    pub checkpoint_every: u64,
    pub val_every: u64,
    pub weights: WeightsSection,
    pub mix: MixSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: "ea".into(),
            lr_d: 2e-4,
            lr_g: 2e-4,
            lr_motor: 1e-3,
            batch_size: 4,
            seq_batch: 2,
            seq_len_phase1: 10,
            seq_len_phase2: 50,
            steps_phase1: 3000,
            steps_phase2: 1000,
            checkpoint_every: 500,
            val_every: 100,
            weights: WeightsSection::default(),
            mix: MixSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per seed.
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub disturbance_fraction: f64,
    /// Real clutter during the disturbance test.
    pub disturbance_clutter: bool,
    /// Draw actions from the mixture; otherwise use the most probable component mean.
    pub sample: bool,
    /// Held-out frames exported as attention overlays in reports.
    pub overlay_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            seeds: vec![1, 2, 3],
            max_steps: 600,
            clutter_min: 2,
            clutter_max: 3,
            disturbance_fraction: 0.25,
            disturbance_clutter: false,
            sample: true,
            overlay_frames: 8,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr_d > 0.0 && t.lr_g > 0.0 && t.lr_motor > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.seq_len_phase2 < t.seq_len_phase1 {
            return Err(Error::Config(format!("phase-2 sequence length {} is shorter than phase-1 length {}", t.seq_len_phase2, t.seq_len_phase1)));
        }
        if t.batch_size == 0 || t.seq_batch == 0 || t.seq_len_phase1 == 0 {
            return Err(Error::Config("batch sizes and sequence lengths must be positive".into()));
        }
        Arch::parse(&t.arch)?;
        if self.eval.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("at least one evaluation seed is required".into()));
        }
        if self.augment.clutter_min > self.augment.clutter_max || self.augment.real_clutter_min > self.augment.real_clutter_max {
            return Err(Error::Config("clutter ranges must satisfy min <= max".into()));
        }
        if self.eval.clutter_min > self.eval.clutter_max {
            return Err(Error::Config("evaluation clutter range must satisfy min <= max".into()));
        }
        if self.data.heldout_every == 1 {
            return Err(Error::Config("heldout_every = 1 would hold out every sample".into()));
        }
        self.vision()?.validate()?;
        self.tasks()?;
        Ok(())
    }

    pub fn arch(&self) -> Result<Arch> {
        Ok(Arch::parse(&self.train.arch)?)
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig::default()
    }

    pub fn vision(&self) -> Result<VisionConfig> {
        let m = &self.model;
        let s = self.sim();
        Ok(VisionConfig {
            resolution: self.data.resolution,
            channels: m.channels,
            d_z: m.d_z,
            d_f: m.d_f,
            n_shapes: s.n_shapes,
            n_colors: s.n_colors,
            task_channels: m.task_channels,
            fusion_block: m.fusion_block,
            grid: m.grid,
            attention_channels: m.attention_channels.clone(),
            d_phi: m.d_phi,
            d_psi: m.d_psi,
            head_hidden: m.head_hidden,
            threshold: m.threshold,
            ..VisionConfig::default()
        })
    }

    pub fn motor(&self) -> MotorConfig {
        let s = self.sim();
        MotorConfig {
            d_z: self.model.d_z,
            task_dim: s.n_shapes + s.n_colors + Action::ALL.len(),
            joints: s.command_dim(),
            hidden: self.model.hidden,
            layers: self.model.layers,
            components: self.model.components,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        let a = &self.augment;
        AugmentConfig {
            clutter_min: a.clutter_min,
            clutter_max: a.clutter_max,
            scale_jitter: a.scale_jitter,
            rotation_jitter: a.rotation_jitter_deg.to_radians(),
            min_separation: a.min_separation,
            real_clutter_min: a.real_clutter_min,
            real_clutter_max: a.real_clutter_max,
            ..AugmentConfig::default()
        }
    }

    pub fn demo(&self) -> DemoConfig {
        DemoConfig { resolution: self.data.resolution, ..DemoConfig::default() }
    }

    pub fn weights(&self) -> LossWeights {
        let w = &self.train.weights;
        LossWeights { gd: w.gd, rec: w.rec, fea: w.fea, prior: w.prior, motor: w.motor, attention: w.attention, mrec: w.mrec, sparsity: w.sparsity }
    }

    /// Resolved task list in a fixed order.
    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let s = self.sim();
        if self.data.tasks.is_empty() {
            return Ok(TaskSpec::grid(s.n_shapes, s.n_colors));
        }
        let vocab = Vocab::default();
        self.data.tasks.iter().map(|t| Ok(vocab.parse_task(t)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(c.tasks().unwrap().len(), 24);
    }

    #[test]
    fn rejects_short_phase_two() {
        let text = "[train]\nseq_len_phase1 = 20\nseq_len_phase2 = 10\n";
        assert!(matches!(Config::parse(text), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(Config::parse("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::parse("seed = 7\n[data]\ntasks = [\"pick:red:bowl\"]\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.tasks().unwrap().len(), 1);
    }
}
