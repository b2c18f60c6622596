//! Two-phase training runs: joint adversarial/controller training, then controller fine-tuning on cached latents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use asor_core::losses::LossBundle;
use asor_core::model::{Arch, Model};
use asor_core::train::{disc_graph, gen_graph, motor_loss_value, motor_step, train_step, Optimizers, RunningThreshold, SeqBatch, VisionBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{vision_hash, Checkpoint, Meta};
use crate::config::Config;
use crate::dataset::{BatchIds, Dataset, FeatureCache, Manifest, Split};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::io::{append_jsonl, write_json};
use crate::Layout;

const VAL_SEED: u64 = 0x7a1;

#[derive(Debug, Clone, Serialize)]
struct LogRow<'a> {
    step: u64,
    phase: &'a str,
    split: &'a str,
    losses: BTreeMap<&'static str, f64>,
    wall_time: f64,
}

fn losses_map(b: &LossBundle) -> BTreeMap<&'static str, f64> {
    b.fields().into_iter().collect()
}

/// Probability that a controller window reads composited frames.
fn augmented_prob(cfg: &Config, arch: Arch) -> f64 {
    if arch == Arch::Baseline {
        0.0
    } else {
        cfg.train.mix.augmented_windows
    }
}

/// Held-out split when it has trajectories, otherwise the training split.
fn val_split(data: &Dataset) -> Split {
    if data.trajectories_of(Split::Val).is_empty() {
        Split::Train
    } else {
        Split::Val
    }
}

/// Every loss term on a fixed batch without touching parameters.
pub fn evaluate_losses(model: &Model<f32>, batch: &VisionBatch<f32>, seq: &SeqBatch<f32>, cfg: &Config) -> Result<LossBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED);
    let (_, _, d) = disc_graph(model, batch, &mut rng)?;
    let (_, _, t) = gen_graph(model, batch, Some(seq), &cfg.weights(), &mut rng)?;
    Ok(LossBundle {
        l_real: d.l_real,
        l_fake: d.l_fake,
        l_noise: d.l_noise,
        l_d: d.l_d,
        l_gd: t.l_gd,
        l_rec: t.l_rec,
        l_fea: t.l_fea,
        l_prior: t.l_prior,
        l_motor: t.l_motor,
        l_a: t.l_a,
        l_mrec: t.l_mrec,
        l_g: t.l_g,
    })
}

pub struct ValBatch {
    pub vision: VisionBatch<f32>,
    pub seq: SeqBatch<f32>,
}

/// The fixed held-out batch used for model selection.
pub fn validation_batch(cfg: &Config, data: &Dataset, arch: Arch) -> Result<ValBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[12]));
    let split = val_split(data);
    let synth_split = if data.synthetic.iter().any(|s| s.split == Split::Val) { Split::Val } else { Split::Train };
    let (vision, _) = if split == synth_split {
        data.sample_vision_batch(&cfg.train.mix, cfg.train.batch_size, split, arch, &mut rng)?
    } else {
        data.sample_vision_batch(&cfg.train.mix, cfg.train.batch_size, Split::Train, arch, &mut rng)?
    };
    let (seq, _) = data.sample_sequence_batch(cfg.train.seq_batch, cfg.train.seq_len_phase1, split, augmented_prob(cfg, arch), &mut rng)?;
    Ok(ValBatch { vision, seq })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Output {
    pub last: PathBuf,
    pub best: PathBuf,
    pub best_hash: String,
    pub steps: u64,
}

fn is_numerical(e: &asor_core::Error) -> bool {
    matches!(e, asor_core::Error::Input(m) if m.ends_with("NaN") || m.ends_with("inf"))
}

fn fresh_model(cfg: &Config, arch: Arch) -> Result<(Model<f32>, Optimizers<f32>, ChaCha8Rng)> {
    let model = Model::<f32>::new(arch, cfg.vision()?, cfg.motor(), derive_seed(cfg.seed, &[10]))?;
    let opt = Optimizers::new(&model, cfg.train.lr_d, cfg.train.lr_g, cfg.train.lr_motor)?;
    Ok((model, opt, ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[11]))))
}

/// Alternating discriminator and generator/controller steps for `steps_phase1` steps, resuming from
/// `resume` when given. The checkpoint with the lowest held-out `l_rec` is kept beside the last one.
pub fn train_phase1(cfg: &Config, data: &Dataset, layout: &Layout, resume: Option<&Path>) -> Result<Phase1Output> {
    let arch = cfg.arch()?;
    let hash = cfg.hash();
    let (mut model, mut opt, mut rng, mut step, mut best) = match resume {
        Some(p) => {
            let (ck, _) = Checkpoint::load(p)?;
            if ck.header.arch != arch.tag() {
                return Err(Error::Provenance(format!("resuming a {} checkpoint as {}", ck.header.arch, arch.tag())));
            }
            let rng = ck.header.rng_state.restore()?;
            (ck.model, ck.opt, rng, ck.header.step, ck.header.best_val_rec)
        }
        None => {
            let (m, o, r) = fresh_model(cfg, arch)?;
            (m, o, r, 0, None)
        }
    };
    let val = validation_batch(cfg, data, arch)?;
    let w = cfg.weights();
    let threshold = cfg.model.running_threshold.map(|momentum| RunningThreshold { momentum });
    let log = layout.logs.join(format!("train_{}.jsonl", arch.tag()));
    let best_path = layout.phase1_best(arch);
    let save = |model: &Model<f32>, opt: &Optimizers<f32>, rng: &ChaCha8Rng, step: u64, best: Option<f64>, path: &Path| -> Result<String> {
        Checkpoint::new(model.clone(), opt.clone(), Meta { step, rng, config_hash: &hash, phase: "phase1", parent: None, best_val_rec: best }).save(path)
    };
    let start = Instant::now();
    let mut best_hash = None;
    if step == 0 && cfg.train.steps_phase1 == 0 {
        best_hash = Some(save(&model, &opt, &rng, 0, None, &best_path)?);
    }
    while step < cfg.train.steps_phase1 {
        let (batch, ids) = data.sample_vision_batch(&cfg.train.mix, cfg.train.batch_size, Split::Train, arch, &mut rng)?;
        let (seq, windows) = data.sample_sequence_batch(cfg.train.seq_batch, cfg.train.seq_len_phase1, Split::Train, augmented_prob(cfg, arch), &mut rng)?;
        let bundle = match train_step(&mut model, &mut opt, &batch, Some(&seq), &w, threshold, &mut rng) {
            Ok(b) => b,
            Err(e) if is_numerical(&e) => return Err(numerical_abort(layout, arch, step + 1, ids, windows, &e)),
            Err(e) => return Err(e.into()),
        };
        step += 1;
        append_jsonl(&log, &LogRow { step, phase: "phase1", split: "train", losses: losses_map(&bundle), wall_time: start.elapsed().as_secs_f64() })?;
        if step % cfg.train.val_every.max(1) == 0 || step == cfg.train.steps_phase1 {
            let v = evaluate_losses(&model, &val.vision, &val.seq, cfg)?;
            append_jsonl(&log, &LogRow { step, phase: "phase1", split: "val", losses: losses_map(&v), wall_time: start.elapsed().as_secs_f64() })?;
            let improved = match best {
                Some(b) => v.l_rec < b,
                None => true,
            };
            if improved {
                best = Some(v.l_rec);
                best_hash = Some(save(&model, &opt, &rng, step, best, &best_path)?);
            }
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            save(&model, &opt, &rng, step, best, &layout.checkpoints.join(format!("{}_phase1_step{step:06}.ckpt", arch.tag())))?;
        }
    }
    let last = layout.phase1(arch);
    let last_hash = save(&model, &opt, &rng, step, best, &last)?;
    let best_hash = match best_hash {
        Some(h) => h,
        None if best_path.exists() => Checkpoint::load(&best_path)?.1,
        None => {
            std::fs::copy(&last, &best_path).map_err(|e| Error::io(&best_path, e))?;
            last_hash
        }
    };
    Ok(Phase1Output { last, best: best_path, best_hash, steps: step })
}

fn numerical_abort(layout: &Layout, arch: Arch, step: u64, ids: BatchIds, windows: Vec<String>, e: &asor_core::Error) -> Error {
    let ids = BatchIds { windows, ..ids };
    let path = layout.logs.join(format!("nan_{}_step{step:06}.json", arch.tag()));
    let batch = match write_json(&path, &ids) {
        Ok(()) => path.display().to_string(),
        Err(_) => format!("{ids:?}"),
    };
    Error::Numerical { step, batch, msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Output {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
}

/// Latents of every demonstration frame under `checkpoint`, reusing a cache produced by that checkpoint.
pub fn feature_cache(model: &Model<f32>, data: &Dataset, manifest: &Manifest, checkpoint_hash: &str, stem: &Path) -> Result<FeatureCache> {
    if stem.with_extension("json").exists() {
        let cache = FeatureCache::load(stem)?;
        if cache.checkpoint == checkpoint_hash {
            cache.check_against(manifest)?;
            return Ok(cache);
        }
    }
    let cache = FeatureCache::compute(model, data, checkpoint_hash)?;
    cache.save(stem)?;
    Ok(cache)
}

/// Controller-only fine-tuning with longer windows over cached latents.
pub fn train_phase2(cfg: &Config, data: &Dataset, manifest: &Manifest, cache: &FeatureCache, layout: &Layout, phase1: &Path) -> Result<Phase2Output> {
    let arch = cfg.arch()?;
    let (ck, parent) = Checkpoint::load(phase1)?;
    if cache.checkpoint != parent {
        return Err(Error::Provenance(format!("feature cache was produced by {} but the checkpoint is {parent}", cache.checkpoint)));
    }
    if cache.d_z != ck.model.vision.d_z {
        return Err(Error::Provenance(format!("cache latents of {} for a d_z {} model", cache.d_z, ck.model.vision.d_z)));
    }
    cache.check_against(manifest)?;
    let mut model = ck.model;
    let mut motor = ck.opt.motor.clone();
    motor.lr = cfg.train.lr_motor;
    let frozen = vision_hash(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[20]));
    let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[21]));
    let aug = augmented_prob(cfg, arch);
    let (val_seq, _) = data.sample_latent_batch(cache, cfg.train.seq_batch.max(4), cfg.train.seq_len_phase2, val_split(data), aug, &mut vrng)?;
    let log = layout.logs.join(format!("train_{}.jsonl", arch.tag()));
    let start = Instant::now();
    let before = motor_loss_value(&model, &val_seq)?;
    let row =
        |step: u64, split: &'static str, l: f64| LogRow { step, phase: "phase2", split, losses: [("l_motor", l)].into_iter().collect(), wall_time: start.elapsed().as_secs_f64() };
    append_jsonl(&log, &row(0, "val", before))?;
    for step in 1..=cfg.train.steps_phase2 {
        let (seq, windows) = data.sample_latent_batch(cache, cfg.train.seq_batch, cfg.train.seq_len_phase2, Split::Train, aug, &mut rng)?;
        let l = match motor_step(&mut model, &mut motor, &seq) {
            Ok(l) => l,
            Err(e) if is_numerical(&e) => return Err(numerical_abort(layout, arch, ck.header.step + step, BatchIds::default(), windows, &e)),
            Err(e) => return Err(e.into()),
        };
        append_jsonl(&log, &row(step, "train", l))?;
    }
    let after = motor_loss_value(&model, &val_seq)?;
    append_jsonl(&log, &row(cfg.train.steps_phase2, "val", after))?;
    if vision_hash(&model) != frozen {
        return Err(Error::Provenance("vision parameters changed during controller fine-tuning".into()));
    }
    let mut opt = ck.opt;
    opt.motor = motor;
    let path = layout.final_checkpoint(arch);
    let out = Checkpoint::new(
        model,
        opt,
        Meta { step: ck.header.step + cfg.train.steps_phase2, rng: &rng, config_hash: &cfg.hash(), phase: "phase2", parent: Some(parent), best_val_rec: ck.header.best_val_rec },
    );
    let hash = out.save(&path)?;
    Ok(Phase2Output { checkpoint: path, hash, val_nll_before: before, val_nll_after: after })
}

/// Phase 1, the latent cache of its best checkpoint, then phase 2.
pub fn train(cfg: &Config, manifest: &Manifest, data: &Dataset, layout: &Layout, resume: Option<&Path>) -> Result<Phase2Output> {
    let arch = cfg.arch()?;
    let p1 = train_phase1(cfg, data, layout, resume)?;
    let (best, hash) = Checkpoint::load(&p1.best)?;
    let cache = feature_cache(&best.model, data, manifest, &hash, &layout.features(arch))?;
    train_phase2(cfg, data, manifest, &cache, layout, &p1.best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate;

    fn small_config(arch: &str) -> Config {
        let mut c = Config::default();
        c.data.tasks = vec!["pick:red:bowl".into(), "push:blue:ring".into()];
        c.data.demos_per_task = 3;
        c.data.synthetic_per_task = 3;
        c.data.real_clutter = 3;
        c.data.heldout_every = 3;
        c.data.resolution = 32;
        c.model.channels = [4, 4, 4, 4];
        c.model.d_z = 4;
        c.model.d_f = 8;
        c.model.task_channels = 2;
        c.model.grid = 4;
        c.model.attention_channels = vec![4, 4];
        c.model.d_phi = 4;
        c.model.d_psi = 4;
        c.model.head_hidden = 4;
        c.model.hidden = 8;
        c.model.components = 2;
        c.train.arch = arch.into();
        c.train.batch_size = 2;
        c.train.seq_len_phase1 = 3;
        c.train.seq_len_phase2 = 4;
        c.train.steps_phase1 = 4;
        c.train.steps_phase2 = 3;
        c.train.val_every = 2;
        c.train.checkpoint_every = 2;
        c
    }

    fn setup(cfg: &Config) -> (tempfile::TempDir, Layout, Manifest, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path(), None);
        let m = generate(cfg, &layout.data).unwrap();
        let d = Dataset::load(&layout.data, &m, 4, 3).unwrap();
        (dir, layout, m, d)
    }

    #[test]
    fn zero_steps_saves_the_initialization() {
        let mut cfg = small_config("ia");
        cfg.train.steps_phase1 = 0;
        let (_dir, layout, _, data) = setup(&cfg);
        let out = train_phase1(&cfg, &data, &layout, None).unwrap();
        let (ck, _) = Checkpoint::load(&out.last).unwrap();
        let (init, _, _) = fresh_model(&cfg, Arch::Ia).unwrap();
        assert_eq!(ck.model.store, init.store);
        assert_eq!(ck.header.step, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_config("ea");
        let (_dir, layout, _, data) = setup(&cfg);
        let full = train_phase1(&cfg, &data, &layout, None).unwrap();
        let (a, _) = Checkpoint::load(&full.last).unwrap();
        let mid = layout.checkpoints.join("ea_phase1_step000002.ckpt");
        let other = Layout::new(&layout.root.join("resumed"), Some(&layout.data));
        let resumed = train_phase1(&cfg, &data, &other, Some(&mid)).unwrap();
        let (b, _) = Checkpoint::load(&resumed.last).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.opt, b.opt);
        assert_eq!(a.header.rng_state, b.header.rng_state);
    }

    #[test]
    fn phase_two_freezes_vision_and_checks_provenance() {
        let cfg = small_config("baseline");
        let (_dir, layout, manifest, data) = setup(&cfg);
        let out = train(&cfg, &manifest, &data, &layout, None).unwrap();
        let (p1, _) = Checkpoint::load(&layout.phase1_best(Arch::Baseline)).unwrap();
        let (p2, _) = Checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(vision_hash(&p1.model), vision_hash(&p2.model));
        assert_ne!(p1.model.store, p2.model.store);
        let mut cache = FeatureCache::load(&layout.features(Arch::Baseline)).unwrap();
        cache.checkpoint = "something else".into();
        let e = train_phase2(&cfg, &data, &manifest, &cache, &layout, &layout.phase1_best(Arch::Baseline)).unwrap_err();
        assert!(matches!(e, Error::Provenance(_)));
    }

    #[test]
    fn cache_matches_direct_encoding() {
        let cfg = small_config("ia");
        let (_dir, layout, manifest, data) = setup(&cfg);
        let (model, _, _) = fresh_model(&cfg, Arch::Ia).unwrap();
        let cache = feature_cache(&model, &data, &manifest, "h", &layout.features(Arch::Ia)).unwrap();
        let frames: usize = data.trajectories.iter().map(|t| 2 * t.len()).sum();
        assert_eq!(cache.len(), frames);
        let again = FeatureCache::compute(&model, &data, "h").unwrap();
        assert_eq!(again, cache);
        let tr = &data.trajectories[1];
        let direct = model.latent_means(&[&tr.augmented[3]], &[tr.task]).unwrap();
        let cached = cache.get(&tr.frame_id(asor_core::sim::FrameKind::DemoAug, 3)).unwrap();
        for (a, b) in direct[0].iter().zip(cached) {
            assert_eq!(*a as f32, *b);
        }
    }
}
