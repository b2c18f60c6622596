//! Command-line verbs: `gen-data`, `train`, `eval`, `report`, `inspect`.

use std::path::{Path, PathBuf};

use asor_core::model::Arch;
use asor_core::policy::LearnedPolicy;
use asor_core::sim::Sim;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::dataset::{generate, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, vision_metrics, Condition, EvalSettings, SuccessTable};
use crate::io::{write_json, write_jsonl};
use crate::report::{overlay_frames, table_path, vision_path, write_overlays, write_report};
use crate::{trainer, Layout};

#[derive(Debug, Parser)]
#[command(name = "asor", version, about = "Synthetic-clutter augmentation lab: data, training, evaluation and reports")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed of every derived random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root holding checkpoints/, logs/ and reports/.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Dataset root; defaults to <out>/data.
    #[arg(long, global = true, env = "ASOR_DATA_DIR")]
    pub data: Option<PathBuf>,
    /// Comma-separated `action:color:shape` tasks.
    #[arg(long, global = true, value_delimiter = ',')]
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Ia,
    Ea,
    Baseline,
    All,
}

impl ArchArg {
    fn arches(self) -> Vec<Arch> {
        match self {
            ArchArg::Ia => vec![Arch::Ia],
            ArchArg::Ea => vec![Arch::Ea],
            ArchArg::Baseline => vec![Arch::Baseline],
            ArchArg::All => Arch::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Record demonstrations, synthetic sets and real clutter into the dataset root.
    GenData {
        /// Demonstrations per task.
        #[arg(long)]
        demos: Option<usize>,
        /// Synthetic sets per task.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Real-clutter frames.
        #[arg(long)]
        real_clutter: Option<usize>,
    },
    /// Two-phase training of one or all architectures.
    Train {
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        /// Phase-one steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Phase-two steps.
        #[arg(long)]
        phase2_steps: Option<u64>,
        /// Phase-one checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Closed-loop success tables and held-out vision metrics.
    Eval {
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        /// Restrict to the clean (off) or cluttered (on) condition.
        #[arg(long, value_enum)]
        clutter: Option<OnOff>,
        /// Run only the recovery condition.
        #[arg(long)]
        disturbance: bool,
        /// Episodes per task and seed.
        #[arg(long)]
        trials: Option<usize>,
        /// Tick limit per episode.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Explicit checkpoint; defaults to <out>/checkpoints/<arch>.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Markdown report, charts and attention overlays from evaluation outputs.
    Report,
    /// Summary of a checkpoint or dataset root.
    Inspect { path: PathBuf },
}

/// Config file, then flags.
pub fn resolve(common: &Common, verb: &Verb) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if !common.tasks.is_empty() {
        cfg.data.tasks = common.tasks.clone();
    }
    match verb {
        Verb::GenData { demos, synthetic, real_clutter } => {
            set(&mut cfg.data.demos_per_task, *demos);
            set(&mut cfg.data.synthetic_per_task, *synthetic);
            set(&mut cfg.data.real_clutter, *real_clutter);
        }
        Verb::Train { steps, phase2_steps, .. } => {
            set(&mut cfg.train.steps_phase1, *steps);
            set(&mut cfg.train.steps_phase2, *phase2_steps);
        }
        Verb::Eval { trials, max_steps, .. } => {
            set(&mut cfg.eval.trials, *trials);
            set(&mut cfg.eval.max_steps, *max_steps);
        }
        Verb::Report | Verb::Inspect { .. } => {}
    }
    cfg.validate()?;
    cfg.tasks()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn snapshot(cfg: &Config, layout: &Layout, name: &str) -> Result<()> {
    crate::error::write(&layout.logs.join(format!("resolved_{name}.toml")), cfg.to_toml())
}

fn arches(arg: Option<ArchArg>, cfg: &Config) -> Result<Vec<Arch>> {
    match arg {
        Some(a) => Ok(a.arches()),
        None => Ok(vec![cfg.arch()?]),
    }
}

fn load_data(cfg: &Config, layout: &Layout) -> Result<(Manifest, Dataset)> {
    let manifest = Manifest::load(&layout.data)?;
    let v = cfg.vision()?;
    let data = Dataset::load(&layout.data, &manifest, v.n_shapes, v.n_colors)?;
    Ok((manifest, data))
}

pub fn run(cli: Cli) -> Result<()> {
    let layout = Layout::new(&cli.common.out, cli.common.data.as_deref());
    if let Verb::Inspect { path } = &cli.verb {
        return inspect(path);
    }
    let cfg = resolve(&cli.common, &cli.verb)?;
    match cli.verb {
        Verb::GenData { .. } => {
            snapshot(&cfg, &layout, "gen-data")?;
            let manifest = generate(&cfg, &layout.data)?;
            for (kind, n) in manifest.counts() {
                println!("{kind}\t{n}");
            }
            println!("manifest\t{}", manifest.hash());
        }
        Verb::Train { arch, resume, .. } => {
            let (manifest, data) = load_data(&cfg, &layout)?;
            for a in arches(arch, &cfg)? {
                let mut c = cfg.clone();
                c.train.arch = a.tag().into();
                snapshot(&c, &layout, &format!("train_{}", a.tag()))?;
                let out = trainer::train(&c, &manifest, &data, &layout, resume.as_deref())?;
                println!("{}\t{}\t{}\tval_nll {:.4} -> {:.4}", a.tag(), out.checkpoint.display(), out.hash, out.val_nll_before, out.val_nll_after);
            }
        }
        Verb::Eval { arch, clutter, disturbance, checkpoint, .. } => {
            let conditions = match (disturbance, clutter) {
                (true, _) => vec![Condition::Disturbance],
                (false, Some(OnOff::On)) => vec![Condition::Clutter],
                (false, Some(OnOff::Off)) => vec![Condition::NoClutter],
                (false, None) => Condition::ALL.to_vec(),
            };
            let arches = arches(arch, &cfg)?;
            if checkpoint.is_some() && arches.len() > 1 {
                return Err(Error::Config("--checkpoint needs a single --arch".into()));
            }
            let sim = Sim::new(cfg.sim())?;
            let tasks = cfg.tasks()?;
            let settings = EvalSettings::from_config(&cfg);
            let data = if layout.data.join(crate::dataset::MANIFEST).exists() { Some(load_data(&cfg, &layout)?.1) } else { None };
            for a in arches {
                let path = checkpoint.clone().unwrap_or_else(|| layout.final_checkpoint(a));
                let (ckpt, hash) = Checkpoint::load(&path)?;
                if ckpt.model.arch != a {
                    return Err(Error::Provenance(format!("{} holds a {} model", path.display(), ckpt.model.arch.tag())));
                }
                let mut c = cfg.clone();
                c.train.arch = a.tag().into();
                snapshot(&c, &layout, &format!("eval_{}", a.tag()))?;
                let mut policy = LearnedPolicy::new(&ckpt.model, cfg.eval.sample);
                let mut table = SuccessTable::default();
                let mut episodes = Vec::new();
                for &cond in &conditions {
                    let (t, e) = evaluate(&mut policy, &sim, &tasks, cond, &settings, &hash)?;
                    if let Some(all) = t.overall(cond) {
                        println!("{}\t{}\t{:.1}%\t{}/{}", a.tag(), cond.tag(), all.pct, all.successes, all.trials);
                    }
                    table.rows.extend(t.rows);
                    episodes.extend(e);
                }
                table.write_csv(&table_path(&layout.reports, a))?;
                write_jsonl(&layout.reports.join(format!("episodes_{}.jsonl", a.tag())), &episodes)?;
                if let Some(d) = &data {
                    let m = vision_metrics(&ckpt.model, d, &sim, 256)?;
                    write_json(&vision_path(&layout.reports, a), &m)?;
                }
            }
        }
        Verb::Report => {
            snapshot(&cfg, &layout, "report")?;
            let mut overlays = Vec::new();
            let ea = layout.final_checkpoint(Arch::Ea);
            if cfg.eval.overlay_frames > 0 && ea.exists() && layout.data.join(crate::dataset::MANIFEST).exists() {
                let (_, data) = load_data(&cfg, &layout)?;
                let (ckpt, _) = Checkpoint::load(&ea)?;
                let frames = overlay_frames(&data, cfg.eval.overlay_frames);
                overlays = write_overlays(&ckpt.model, &frames, &layout.reports)?;
            }
            let path = write_report(&layout.reports, &cfg.hash(), &overlays)?;
            println!("{}", path.display());
        }
        Verb::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let m = Manifest::load(path)?;
        println!("records\t{}", m.records.len());
        for (kind, n) in m.counts() {
            println!("{kind}\t{n}");
        }
        println!("manifest\t{}", m.hash());
        return Ok(());
    }
    let (ckpt, hash) = Checkpoint::load(path)?;
    let h = &ckpt.header;
    println!("sha256\t{hash}");
    println!("arch\t{}", h.arch);
    println!("phase\t{}", h.phase);
    println!("step\t{}", h.step);
    println!("parent\t{}", h.parent.as_deref().unwrap_or("-"));
    println!("config\t{}", h.config_hash);
    println!("params\t{}", ckpt.model.param_count());
    println!("{}", ckpt.model.describe());
    Ok(())
}
