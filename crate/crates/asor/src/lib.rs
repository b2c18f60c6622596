//! Files, training runs, evaluation and the command line around `asor-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod io;
pub mod report;
pub mod trainer;

pub use asor_core;
pub use error::{Error, Result};

/// Independent stream seed from a base seed and a path of indices (splitmix64 chain).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for &p in path {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `<out>/{data,checkpoints,logs,reports}`; the data root can live elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: std::path::PathBuf,
    pub data: std::path::PathBuf,
    pub checkpoints: std::path::PathBuf,
    pub logs: std::path::PathBuf,
    pub reports: std::path::PathBuf,
}

impl Layout {
    pub fn new(out: &std::path::Path, data: Option<&std::path::Path>) -> Self {
        Self {
            root: out.to_path_buf(),
            data: data.map(|d| d.to_path_buf()).unwrap_or_else(|| out.join("data")),
            checkpoints: out.join("checkpoints"),
            logs: out.join("logs"),
            reports: out.join("reports"),
        }
    }

    pub fn phase1(&self, arch: asor_core::model::Arch) -> std::path::PathBuf {
        self.checkpoints.join(format!("{}_phase1.ckpt", arch.tag()))
    }

    pub fn phase1_best(&self, arch: asor_core::model::Arch) -> std::path::PathBuf {
        self.checkpoints.join(format!("{}_phase1_best.ckpt", arch.tag()))
    }

    pub fn final_checkpoint(&self, arch: asor_core::model::Arch) -> std::path::PathBuf {
        self.checkpoints.join(format!("{}.ckpt", arch.tag()))
    }

    pub fn features(&self, arch: asor_core::model::Arch) -> std::path::PathBuf {
        self.checkpoints.join(format!("{}_features", arch.tag()))
    }
}
