//! Markdown summary, bar charts, attention overlays and ordering checks over evaluation outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use asor_core::ea::AttentionMap;
use asor_core::model::{Arch, Model};
use asor_core::sim::{Frame, FrameKind};
use asor_core::task::TaskSpec;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evalharness::{Condition, SuccessTable, VisionMetrics};
use crate::io::{read_json, save_png};

pub fn table_path(reports: &Path, arch: Arch) -> PathBuf {
    reports.join(format!("eval_{}.csv", arch.tag()))
}

pub fn vision_path(reports: &Path, arch: Arch) -> PathBuf {
    reports.join(format!("vision_{}.json", arch.tag()))
}

/// One checked comparison between architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

fn overall(tables: &BTreeMap<Arch, SuccessTable>, arch: Arch, c: Condition) -> Option<(f64, usize)> {
    tables.get(&arch)?.overall(c).map(|r| (r.pct, r.trials))
}

/// Clutter ordering `EA ≥ IA ≥ baseline + 20`, the baseline clutter ceiling and the recovery gap,
/// each over the `all` rows. Checks whose inputs are missing are reported as failing.
pub fn ordering_checks(tables: &BTreeMap<Arch, SuccessTable>) -> Vec<OrderingCheck> {
    let ea = overall(tables, Arch::Ea, Condition::Clutter);
    let ia = overall(tables, Arch::Ia, Condition::Clutter);
    let bl = overall(tables, Arch::Baseline, Condition::Clutter);
    let ea_d = overall(tables, Arch::Ea, Condition::Disturbance);
    let bl_d = overall(tables, Arch::Baseline, Condition::Disturbance);
    let fmt = |v: Option<(f64, usize)>| v.map(|(p, n)| format!("{p:.1}% of {n}")).unwrap_or_else(|| "missing".into());
    let mut out = Vec::new();
    let holds = matches!((ea, ia, bl), (Some(e), Some(i), Some(b)) if e.0 >= i.0 && i.0 >= b.0 + 20.0);
    out.push(OrderingCheck { name: "clutter: EA >= IA >= baseline + 20".into(), holds, detail: format!("EA {}, IA {}, baseline {}", fmt(ea), fmt(ia), fmt(bl)) });
    out.push(OrderingCheck { name: "clutter: baseline <= 15%".into(), holds: bl.is_some_and(|b| b.0 <= 15.0), detail: format!("baseline {}", fmt(bl)) });
    let holds = matches!((ea_d, bl_d), (Some(e), Some(b)) if e.0 >= b.0 + 20.0);
    out.push(OrderingCheck { name: "recovery: EA >= baseline + 20".into(), holds, detail: format!("EA {}, baseline {}", fmt(ea_d), fmt(bl_d)) });
    out
}

const ARCH_COLORS: [[u8; 3]; 3] = [[70, 120, 200], [220, 120, 40], [120, 120, 120]];

/// Bars of the overall success of each architecture under `condition`: one bar per arch in
/// IA, EA, baseline order, height proportional to the percentage, with 25% grid lines.
pub fn bar_chart(tables: &BTreeMap<Arch, SuccessTable>, condition: Condition) -> Frame {
    let (bar, gap, h) = (40usize, 20usize, 200usize);
    let w = gap + Arch::ALL.len() * (bar + gap);
    let mut f = Frame::new(w, h + 10, FrameKind::Demo);
    f.data.fill(255);
    for q in 0..=4 {
        let y = h + 5 - q * h / 4;
        for x in 0..w {
            f.set_pixel(x, y.min(h + 9), [210, 210, 210]);
        }
    }
    for (i, arch) in Arch::ALL.into_iter().enumerate() {
        let Some((p, _)) = overall(tables, arch, condition) else { continue };
        let top = h + 5 - ((p / 100.0) * h as f64).round() as usize;
        let x0 = gap + i * (bar + gap);
        for y in top..=h + 5 {
            for x in x0..x0 + bar {
                f.set_pixel(x, y, ARCH_COLORS[i]);
            }
        }
    }
    f
}

/// Input, attention heat overlay and masked input side by side.
pub fn overlay(frame: &Frame, map: &AttentionMap) -> Result<Frame> {
    let masked = asor_core::ea::mask(frame, map)?;
    let (w, h) = (frame.width, frame.height);
    let (bh, bw) = (h / map.k_h, w / map.k_w);
    let mut out = Frame::new(3 * w, h, FrameKind::Demo);
    for y in 0..h {
        for x in 0..w {
            let src = frame.pixel(x, y);
            let a = 0.7 * map.p[(y / bh) * map.k_w + x / bw];
            let heat = [0, 1, 2].map(|c| {
                let target = [255.0, 0.0, 0.0][c];
                ((1.0 - a) * src[c] as f64 + a * target).round().clamp(0.0, 255.0) as u8
            });
            out.set_pixel(x, y, src);
            out.set_pixel(w + x, y, heat);
            out.set_pixel(2 * w + x, y, masked.pixel(x, y));
        }
    }
    Ok(out)
}

/// Stacks equally sized frames vertically.
pub fn contact_sheet(frames: &[Frame]) -> Option<Frame> {
    let first = frames.first()?;
    let mut out = Frame::new(first.width, first.height * frames.len(), FrameKind::Demo);
    for (i, f) in frames.iter().enumerate() {
        let off = i * f.data.len();
        out.data[off..off + f.data.len()].copy_from_slice(&f.data);
    }
    Some(out)
}

/// Held-out composited frames (cluttered first) for qualitative panels.
pub fn overlay_frames(data: &Dataset, n: usize) -> Vec<(&Frame, TaskSpec)> {
    let mut out: Vec<(&Frame, TaskSpec)> = data.synthetic.iter().filter(|s| s.split == Split::Val).map(|s| (&s.o_eac, s.task)).collect();
    for tr in data.trajectories.iter().filter(|t| t.split == Split::Val) {
        out.push((&tr.augmented[tr.len() / 2], tr.task));
    }
    out.truncate(n);
    out
}

/// Writes one overlay per requested frame plus a contact sheet; returns the overlay paths.
pub fn write_overlays(model: &Model<f32>, frames: &[(&Frame, TaskSpec)], dir: &Path) -> Result<Vec<PathBuf>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Frame> = frames.iter().map(|f| f.0).collect();
    let tasks: Vec<TaskSpec> = frames.iter().map(|f| f.1).collect();
    let maps = model.attention_maps(&refs, &tasks)?;
    let mut panels = Vec::new();
    let mut paths = Vec::new();
    for (i, (f, m)) in refs.iter().zip(&maps).enumerate() {
        let o = overlay(f, m)?;
        let p = dir.join(format!("overlay_{i:03}.png"));
        save_png(&o, &p)?;
        paths.push(p);
        panels.push(o);
    }
    if let Some(sheet) = contact_sheet(&panels) {
        save_png(&sheet, &dir.join("overlay_sheet.png"))?;
    }
    Ok(paths)
}

/// Reads whatever tables and vision metrics exist under `reports`.
pub fn collect(reports: &Path) -> Result<(BTreeMap<Arch, SuccessTable>, BTreeMap<Arch, VisionMetrics>)> {
    let mut tables = BTreeMap::new();
    let mut vision = BTreeMap::new();
    for arch in Arch::ALL {
        let t = table_path(reports, arch);
        if t.exists() {
            tables.insert(arch, SuccessTable::read_csv(&t)?);
        }
        let v = vision_path(reports, arch);
        if v.exists() {
            vision.insert(arch, read_json(&v)?);
        }
    }
    Ok((tables, vision))
}

/// `report.md`, one bar chart per condition and the ordering checks as JSON.
pub fn write_report(reports: &Path, config_hash: &str, overlays: &[PathBuf]) -> Result<PathBuf> {
    let (tables, vision) = collect(reports)?;
    if tables.is_empty() {
        return Err(Error::Config(format!("no evaluation tables under {}", reports.display())));
    }
    let mut md = String::new();
    let _ = writeln!(md, "# Evaluation report\n");
    let _ = writeln!(md, "Config hash: `{config_hash}`\n");
    for (arch, t) in &tables {
        let hashes: std::collections::BTreeSet<&str> = t.rows.iter().map(|r| r.checkpoint_hash.as_str()).collect();
        let seeds: std::collections::BTreeSet<&str> = t.rows.iter().map(|r| r.seed_list.as_str()).collect();
        let _ = writeln!(md, "- {}: checkpoint {}, seeds {}", arch.tag(), hashes.into_iter().collect::<Vec<_>>().join(", "), seeds.into_iter().collect::<Vec<_>>().join(", "));
    }
    let _ = writeln!(md, "\n## Success (overall rows)\n");
    let _ = writeln!(md, "| arch | no clutter | clutter | recovery |");
    let _ = writeln!(md, "|---|---|---|---|");
    for (arch, t) in &tables {
        let cell = |c| t.overall(c).map(|r| format!("{:.1}% ({}/{})", r.pct, r.successes, r.trials)).unwrap_or_else(|| "-".into());
        let _ = writeln!(md, "| {} | {} | {} | {} |", arch.tag(), cell(Condition::NoClutter), cell(Condition::Clutter), cell(Condition::Disturbance));
    }
    let _ = writeln!(md, "\nThe recovery protocol teleports the target once per episode and is a reconstruction, not a measured robot experiment.\n");
    let _ = writeln!(md, "## Ordering checks\n");
    let checks = ordering_checks(&tables);
    for c in &checks {
        let _ = writeln!(md, "- [{}] {}: {}", if c.holds { "holds" } else { "fails" }, c.name, c.detail);
    }
    crate::io::write_json(&reports.join("ordering.json"), &checks)?;
    if !vision.is_empty() {
        let _ = writeln!(md, "\n## Held-out vision metrics\n");
        let _ = writeln!(md, "| arch | D shape | D color | D both | D calls real fake | rec closer to clean | attention argmax in target | attention median IoU |");
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        for (arch, v) in &vision {
            let _ = writeln!(
                md,
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} |",
                arch.tag(),
                v.disc_shape_acc,
                v.disc_color_acc,
                v.disc_joint_acc,
                v.disc_called_fake,
                v.rec_closer_to_clean,
                opt(v.attention_argmax_in_target),
                opt(v.attention_median_iou)
            );
        }
    }
    let _ = writeln!(md, "\n## Charts\n");
    for c in Condition::ALL {
        if tables.values().any(|t| t.overall(c).is_some()) {
            let name = format!("bars_{}.png", c.tag());
            save_png(&bar_chart(&tables, c), &reports.join(&name))?;
            let _ = writeln!(md, "- `{name}`: overall {} success, bars IA (blue), EA (orange), baseline (grey), grid every 25%", c.tag());
        }
    }
    if !overlays.is_empty() {
        let _ = writeln!(md, "\n## Attention overlays\n");
        let _ = writeln!(md, "Each panel: input, attention heat, masked input. `overlay_sheet.png` stacks all {} panels.\n", overlays.len());
        for p in overlays {
            let _ = writeln!(md, "- `{}`", p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
        }
    }
    let path = reports.join("report.md");
    crate::error::write(&path, md)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::Row;

    fn table(arch: Arch, clutter: f64, recovery: f64) -> SuccessTable {
        let row = |c: Condition, pct: f64| Row {
            task: "all".into(),
            condition: c.tag().into(),
            trials: 100,
            successes: pct as usize,
            pct,
            seed_list: "1;2;3".into(),
            checkpoint_hash: arch.tag().into(),
        };
        SuccessTable { rows: vec![row(Condition::Clutter, clutter), row(Condition::Disturbance, recovery)] }
    }

    #[test]
    fn ordering_flags() {
        let mut t = BTreeMap::new();
        t.insert(Arch::Ea, table(Arch::Ea, 70.0, 60.0));
        t.insert(Arch::Ia, table(Arch::Ia, 50.0, 40.0));
        t.insert(Arch::Baseline, table(Arch::Baseline, 10.0, 30.0));
        assert!(ordering_checks(&t).iter().all(|c| c.holds));
        t.insert(Arch::Baseline, table(Arch::Baseline, 40.0, 50.0));
        assert!(ordering_checks(&t).iter().all(|c| !c.holds));
        t.remove(&Arch::Ia);
        assert!(!ordering_checks(&t)[0].holds);
    }

    #[test]
    fn report_lists_overlays_and_charts() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Arch::ALL {
            table(arch, 20.0, 10.0).write_csv(&table_path(dir.path(), arch)).unwrap();
        }
        let f = Frame::from_data(8, 8, FrameKind::Demo, vec![100; 192]).unwrap();
        let map = AttentionMap::from_scores(vec![0.9, 0.1, 0.2, 0.6], 2, 2, 0.5).unwrap();
        let o = overlay(&f, &map).unwrap();
        assert_eq!((o.width, o.height), (24, 8));
        assert_eq!(o.pixel(1, 1), [100, 100, 100]);
        assert_eq!(o.pixel(16 + 5, 1), [0, 0, 0]);
        assert_eq!(o.pixel(16 + 5, 5), [10, 10, 10]);
        let paths: Vec<PathBuf> = (0..3).map(|i| dir.path().join(format!("overlay_{i:03}.png"))).collect();
        for p in &paths {
            save_png(&o, p).unwrap();
        }
        let md = std::fs::read_to_string(write_report(dir.path(), "cfg", &paths).unwrap()).unwrap();
        assert_eq!(md.matches("overlay_0").count(), 3);
        assert!(dir.path().join("bars_clutter.png").exists());
        assert!(md.contains("[fails] clutter: EA >= IA >= baseline + 20"));
    }
}
