//! Checkpoint files: magic, a JSON header, then little-endian f32 parameters and Adam moments.

use std::path::Path;

use asor_core::model::{Arch, Model};
use asor_core::motor::MotorConfig;
use asor_core::nets::VisionConfig;
use asor_core::nn::Adam;
use asor_core::train::Optimizers;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read, Error, Result};

const MAGIC: &[u8; 8] = b"ASORCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionRecord {
    pub resolution: usize,
    pub channels: [usize; 4],
    pub d_z: usize,
    pub d_f: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub task_channels: usize,
    pub fusion_block: usize,
    pub grid: usize,
    pub attention_channels: Vec<usize>,
    pub d_phi: usize,
    pub d_psi: usize,
    pub head_hidden: usize,
    pub threshold: f64,
    pub leak: f64,
}

impl VisionRecord {
    pub fn from_config(v: &VisionConfig) -> Self {
        Self {
            resolution: v.resolution,
            channels: v.channels,
            d_z: v.d_z,
            d_f: v.d_f,
            n_shapes: v.n_shapes,
            n_colors: v.n_colors,
            task_channels: v.task_channels,
            fusion_block: v.fusion_block,
            grid: v.grid,
            attention_channels: v.attention_channels.clone(),
            d_phi: v.d_phi,
            d_psi: v.d_psi,
            head_hidden: v.head_hidden,
            threshold: v.threshold,
            leak: v.leak,
        }
    }

    pub fn to_config(&self) -> VisionConfig {
        VisionConfig {
            resolution: self.resolution,
            channels: self.channels,
            d_z: self.d_z,
            d_f: self.d_f,
            n_shapes: self.n_shapes,
            n_colors: self.n_colors,
            task_channels: self.task_channels,
            fusion_block: self.fusion_block,
            grid: self.grid,
            attention_channels: self.attention_channels.clone(),
            d_phi: self.d_phi,
            d_psi: self.d_psi,
            head_hidden: self.head_hidden,
            threshold: self.threshold,
            leak: self.leak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotorRecord {
    pub d_z: usize,
    pub task_dim: usize,
    pub joints: usize,
    pub hidden: usize,
    pub layers: usize,
    pub components: usize,
}

impl MotorRecord {
    pub fn from_config(m: &MotorConfig) -> Self {
        Self { d_z: m.d_z, task_dim: m.task_dim, joints: m.joints, hidden: m.hidden, layers: m.layers, components: m.components }
    }

    pub fn to_config(self) -> MotorConfig {
        MotorConfig { d_z: self.d_z, task_dim: self.task_dim, joints: self.joints, hidden: self.hidden, layers: self.layers, components: self.components }
    }
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::format("rng state", m);
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed is not 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub arch: String,
    pub d_z: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub step: u64,
    pub rng_state: RngState,
    pub config_hash: String,
    /// `phase1`, `phase2` or `init`.
    pub phase: String,
    /// Hash of the checkpoint this one was fine-tuned from.
    pub parent: Option<String>,
    pub best_val_rec: Option<f64>,
    pub threshold: Option<f64>,
    pub vision: VisionRecord,
    pub motor: MotorRecord,
    pub params: Vec<ParamRecord>,
    pub optimizers: Vec<OptimizerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub model: Model<f32>,
    pub opt: Optimizers<f32>,
}

fn opt_record(a: &Adam<f32>) -> OptimizerRecord {
    OptimizerRecord { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, clip_norm: a.clip_norm, step: a.step, params: a.ids.len() }
}

fn push_f32(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over the names and values of every non-controller parameter.
pub fn vision_hash(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    for id in model.vision_ids() {
        h.update(model.store.name(id).as_bytes());
        for v in model.store.get(id).data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub struct Meta<'a> {
    pub step: u64,
    pub rng: &'a ChaCha8Rng,
    pub config_hash: &'a str,
    pub phase: &'a str,
    pub parent: Option<String>,
    pub best_val_rec: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, opt: Optimizers<f32>, meta: Meta<'_>) -> Self {
        let header = Header {
            arch: model.arch.tag().to_string(),
            d_z: model.vision.d_z,
            n_shapes: model.vision.n_shapes,
            n_colors: model.vision.n_colors,
            step: meta.step,
            rng_state: RngState::capture(meta.rng),
            config_hash: meta.config_hash.to_string(),
            phase: meta.phase.to_string(),
            parent: meta.parent,
            best_val_rec: meta.best_val_rec,
            threshold: model.attention.as_ref().map(|a| a.threshold),
            vision: VisionRecord::from_config(&model.vision),
            motor: MotorRecord::from_config(&model.motor_cfg),
            params: model.store.iter().map(|(_, name, t)| ParamRecord { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
            optimizers: [&opt.disc, &opt.gen, &opt.motor].into_iter().map(opt_record).collect(),
        };
        Self { header, model, opt }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in self.model.store.iter() {
            push_f32(&mut out, t.data());
        }
        for a in [&self.opt.disc, &self.opt.gen, &self.opt.motor] {
            for m in a.m.iter().chain(&a.v) {
                push_f32(&mut out, m.data());
            }
        }
        out
    }

    /// Writes the file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        crate::error::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read_header(path: &Path) -> Result<Header> {
        let bytes = read(path)?;
        Ok(split(&bytes, path)?.0)
    }

    /// Loads a checkpoint and returns it with its file hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = read(path)?;
        let (header, mut body) = split(&bytes, path)?;
        let bad = |m: String| Error::format(path.display().to_string(), m);
        let arch = Arch::parse(&header.arch)?;
        let mut model = Model::<f32>::new(arch, header.vision.to_config(), header.motor.to_config(), 0)?;
        if model.store.len() != header.params.len() {
            return Err(bad(format!("{} parameters in the header, {} in the model", header.params.len(), model.store.len())));
        }
        let mut take = |n: usize| -> Result<Vec<f32>> {
            if body.len() < n * 4 {
                return Err(bad("truncated parameter data".into()));
            }
            let (a, rest) = body.split_at(n * 4);
            body = rest;
            Ok(a.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let ids: Vec<_> = model.store.ids().collect();
        for (id, rec) in ids.into_iter().zip(&header.params) {
            if model.store.name(id) != rec.name || model.store.get(id).shape() != rec.shape.as_slice() {
                return Err(bad(format!("parameter {} {:?} does not match the architecture", rec.name, rec.shape)));
            }
            let n = rec.shape.iter().product();
            let data = take(n)?;
            model.store.get_mut(id).data_mut().copy_from_slice(&data);
        }
        if let (Some(att), Some(t)) = (model.attention.as_mut(), header.threshold) {
            att.threshold = t;
        }
        let mut opt = Optimizers::new(&model, 1.0, 1.0, 1.0)?;
        if header.optimizers.len() != 3 {
            return Err(bad(format!("{} optimizer records", header.optimizers.len())));
        }
        for (a, rec) in [&mut opt.disc, &mut opt.gen, &mut opt.motor].into_iter().zip(&header.optimizers) {
            if rec.params != a.ids.len() {
                return Err(bad(format!("optimizer over {} tensors, expected {}", rec.params, a.ids.len())));
            }
            a.lr = rec.lr;
            a.beta1 = rec.beta1;
            a.beta2 = rec.beta2;
            a.eps = rec.eps;
            a.clip_norm = rec.clip_norm;
            a.step = rec.step;
            for m in a.m.iter_mut().chain(a.v.iter_mut()) {
                let data = take(m.len())?;
                m.data_mut().copy_from_slice(&data);
            }
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes", body.len())));
        }
        Ok((Self { header, model, opt }, sha256_hex(&bytes)))
    }
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let bad = |m: &str| Error::format(path.display().to_string(), m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + n {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + n]).map_err(|e| Error::format(path.display().to_string(), e))?;
    Ok((header, &bytes[16 + n..]))
}
