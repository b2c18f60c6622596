//! Synthetic-object compositing that produces the augmented observation classes.
//!
//! Sprites are single-object renders without shadows. Pasting them onto real renders leaves
//! the usual copy-paste artifacts (no shadow, resampling blur, hard occlusion of the arm),
//! which is what the discriminator would otherwise latch onto.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::sim::render::{object_patch, to_byte, Frame, FrameKind, Palette};
use crate::sim::{Rect, Scene, Sim};
use crate::task::TaskSpec;

/// Straight-alpha RGBA patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<[f64; 4]>,
    pub shape_id: usize,
    pub color_id: usize,
    /// Object radius in pixels.
    pub nominal_size: f64,
}

impl Sprite {
    pub fn new(width: usize, height: usize, rgba: Vec<[f64; 4]>, shape_id: usize, color_id: usize, nominal_size: f64) -> Result<Self> {
        if rgba.len() != width * height {
            bail!(Dimension, "{} texels for a {width}x{height} sprite", rgba.len());
        }
        if rgba.iter().any(|p| !(0.0..=1.0).contains(&p[3])) {
            bail!(Validation, "alpha outside [0, 1]");
        }
        Ok(Self { width, height, rgba, shape_id, color_id, nominal_size })
    }

    pub fn alpha(&self, x: usize, y: usize) -> f64 {
        self.rgba[y * self.width + x][3]
    }

    /// Scaled and rotated copy, bilinearly resampled about the center.
    pub fn transformed(&self, scale: f64, angle: f64) -> Sprite {
        if scale == 1.0 && angle == 0.0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (ca, sa) = (libm::cos(angle), libm::sin(angle));
        let mut out = vec![[0.0; 4]; w * h];
        for y in 0..h {
            for x in 0..w {
                // inverse map of the destination texel center into the source
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sx = (ca * dx + sa * dy) / scale + cx - 0.5;
                let sy = (-sa * dx + ca * dy) / scale + cy - 0.5;
                out[y * w + x] = self.sample_premultiplied(sx, sy);
            }
        }
        for p in out.iter_mut() {
            if p[3] > 1e-6 {
                for c in 0..3 {
                    p[c] = (p[c] / p[3]).clamp(0.0, 1.0);
                }
                p[3] = p[3].min(1.0);
            } else {
                *p = [0.0; 4];
            }
        }
        Sprite { width: w, height: h, rgba: out, shape_id: self.shape_id, color_id: self.color_id, nominal_size: self.nominal_size * scale }
    }

    fn sample_premultiplied(&self, sx: f64, sy: f64) -> [f64; 4] {
        let x0 = libm::floor(sx);
        let y0 = libm::floor(sy);
        let (fx, fy) = (sx - x0, sy - y0);
        let mut acc = [0.0; 4];
        for (ox, oy, wgt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
            let (ix, iy) = (x0 as i64 + ox, y0 as i64 + oy);
            if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 || wgt == 0.0 {
                continue;
            }
            let p = self.rgba[iy as usize * self.width + ix as usize];
            for c in 0..3 {
                acc[c] += wgt * p[c] * p[3];
            }
            acc[3] += wgt * p[3];
        }
        acc
    }
}

/// One sprite per (shape, color), rendered at the scale objects appear in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteLibrary {
    pub sprites: Vec<Sprite>,
    pub resolution: usize,
}

impl SpriteLibrary {
    pub fn build(sim: &Sim, resolution: usize) -> Self {
        let palette = Palette::default();
        let radius_px = sim.cfg.object_radius / sim.cfg.table.width() * resolution as f64;
        let size = 2 * libm::ceil(1.35 * radius_px) as usize + 2;
        let mut sprites = Vec::new();
        for shape_id in 0..sim.cfg.n_shapes {
            for color_id in 0..sim.cfg.n_colors {
                let rgba = object_patch(shape_id, palette.color(color_id), radius_px, size, 0.0);
                sprites.push(Sprite { width: size, height: size, rgba, shape_id, color_id, nominal_size: radius_px });
            }
        }
        Self { sprites, resolution }
    }

    pub fn find(&self, shape_id: usize, color_id: usize) -> Option<usize> {
        self.sprites.iter().position(|s| s.shape_id == shape_id && s.color_id == color_id)
    }
}

/// Alpha-over blend of `sprite` centered at pixel `(cx, cy)`; pixels outside the support are untouched.
pub fn composite(frame: &Frame, sprite: &Sprite, center: (i64, i64)) -> Result<Frame> {
    if sprite.width > frame.width || sprite.height > frame.height {
        bail!(Size, "{}x{} sprite on a {}x{} frame", sprite.width, sprite.height, frame.width, frame.height);
    }
    if center.0 < 0 || center.1 < 0 || center.0 >= frame.width as i64 || center.1 >= frame.height as i64 {
        bail!(Placement, "sprite center {center:?} outside the frame");
    }
    let mut out = frame.clone();
    let (ox, oy) = sprite_origin(sprite, center);
    for sy in 0..sprite.height {
        for sx in 0..sprite.width {
            let p = sprite.rgba[sy * sprite.width + sx];
            let (fx, fy) = (ox + sx as i64, oy + sy as i64);
            if p[3] == 0.0 || fx < 0 || fy < 0 || fx >= frame.width as i64 || fy >= frame.height as i64 {
                continue;
            }
            let i = (fy as usize * frame.width + fx as usize) * 3;
            for c in 0..3 {
                let bg = frame.data[i + c] as f64 / 255.0;
                out.data[i + c] = to_byte(bg * (1.0 - p[3]) + p[c] * p[3]);
            }
        }
    }
    Ok(out)
}

fn sprite_origin(sprite: &Sprite, center: (i64, i64)) -> (i64, i64) {
    (center.0 - sprite.width as i64 / 2, center.1 - sprite.height as i64 / 2)
}

/// Pixel indices covered (alpha > 0) by `sprite` centered at `center` on a `width`×`height` frame.
pub fn support(sprite: &Sprite, center: (i64, i64), width: usize, height: usize) -> Vec<usize> {
    let (ox, oy) = sprite_origin(sprite, center);
    let mut out = Vec::new();
    for sy in 0..sprite.height {
        for sx in 0..sprite.width {
            let (fx, fy) = (ox + sx as i64, oy + sy as i64);
            if sprite.alpha(sx, sy) > 0.0 && fx >= 0 && fy >= 0 && fx < width as i64 && fy < height as i64 {
                out.push(fy as usize * width + fx as usize);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub scale_jitter: f64,
    pub rotation_jitter: f64,
    pub min_separation: f64,
    pub region: Rect,
    pub real_clutter_min: usize,
    pub real_clutter_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            clutter_min: 2,
            clutter_max: 3,
            scale_jitter: 0.1,
            rotation_jitter: 15f64.to_radians(),
            min_separation: 0.27,
            region: Rect { x0: 0.1, y0: 0.22, x1: 0.9, y1: 0.88 },
            real_clutter_min: 2,
            real_clutter_max: 5,
        }
    }
}

/// A pasted sprite: library index, world position and the jitter applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub sprite: usize,
    pub shape_id: usize,
    pub color_id: usize,
    pub position: (f64, f64),
    pub scale: f64,
    pub angle: f64,
    pub is_clutter: bool,
}

impl Placement {
    pub fn pixel_center(&self, table: &Rect, resolution: usize) -> (i64, i64) {
        let px = (self.position.0 - table.x0) / table.width() * resolution as f64;
        let py = (table.y1 - self.position.1) / table.height() * resolution as f64;
        (libm::floor(px) as i64, libm::floor(py) as i64)
    }

    pub fn sprite(&self, library: &SpriteLibrary) -> Sprite {
        library.sprites[self.sprite].transformed(self.scale, self.angle)
    }

    pub fn paste(&self, frame: &Frame, library: &SpriteLibrary, table: &Rect) -> Result<Frame> {
        composite(frame, &self.sprite(library), self.pixel_center(table, frame.width))
    }

    pub fn support(&self, library: &SpriteLibrary, table: &Rect, width: usize, height: usize) -> Vec<usize> {
        support(&self.sprite(library), self.pixel_center(table, width), width, height)
    }
}

fn jitter<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> (f64, f64) {
    let scale = 1.0 + rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter);
    let angle = rng.gen_range(-cfg.rotation_jitter..=cfg.rotation_jitter);
    (scale, angle)
}

/// Clutter placements that never reproduce the target's (shape, color) and keep clear of `keep_out`.
pub fn sample_clutter<R: Rng>(library: &SpriteLibrary, target: &TaskSpec, count: usize, keep_out: &[(f64, f64)], cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<Placement>> {
    let allowed: Vec<usize> = (0..library.sprites.len()).filter(|&i| !target.same_object(library.sprites[i].shape_id, library.sprites[i].color_id)).collect();
    if count > 0 && allowed.is_empty() {
        bail!(Library, "no sprite differs from the target");
    }
    let mut taken: Vec<(f64, f64)> = keep_out.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..2000 {
            let p = (rng.gen_range(cfg.region.x0..cfg.region.x1), rng.gen_range(cfg.region.y0..cfg.region.y1));
            if taken.iter().all(|q| libm::hypot(p.0 - q.0, p.1 - q.1) >= cfg.min_separation) {
                placed = Some(p);
                break;
            }
        }
        let position = placed.ok_or_else(|| Error::Placement(format!("could not place {count} clutter sprites")))?;
        taken.push(position);
        let sprite = allowed[rng.gen_range(0..allowed.len())];
        let (scale, angle) = jitter(rng, cfg);
        let s = &library.sprites[sprite];
        out.push(Placement { sprite, shape_id: s.shape_id, color_id: s.color_id, position, scale, angle, is_clutter: true });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    /// A demonstration frame; carries where the real target sits (and moves to).
    Demo {
        target_path: Vec<(f64, f64)>,
    },
    Empty,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentedSet {
    pub o_d: Option<Frame>,
    pub o_da: Option<Frame>,
    pub o_e: Option<Frame>,
    pub o_ea: Option<Frame>,
    pub o_eac: Option<Frame>,
    pub o_rc: Option<Frame>,
    pub task: Option<TaskSpec>,
    pub placements: Vec<Placement>,
}

/// Applies `placements` to `frame` in order.
pub fn apply_placements(frame: &Frame, placements: &[Placement], library: &SpriteLibrary, table: &Rect) -> Result<Frame> {
    let mut out = frame.clone();
    for p in placements {
        out = p.paste(&out, library, table)?;
    }
    Ok(out)
}

/// Placements for one augmented set: the synthetic target (empty sources only) then the clutter.
pub fn plan_augmentation<R: Rng>(sim: &Sim, source: &SourceKind, task: &TaskSpec, library: &SpriteLibrary, cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<Placement>> {
    let target_sprite = library.find(task.shape, task.color).ok_or_else(|| Error::Library(format!("no sprite for shape {} color {}", task.shape, task.color)))?;
    let mut placements = Vec::new();
    let keep_out = match source {
        SourceKind::Demo { target_path } => target_path.clone(),
        SourceKind::Empty => {
            let region = sim.spawn_region(task.action);
            let mut pos = None;
            for _ in 0..1000 {
                let p = (rng.gen_range(region.x0..region.x1), rng.gen_range(region.y0..region.y1));
                if sim.reachable(p) {
                    pos = Some(p);
                    break;
                }
            }
            let position = pos.ok_or_else(|| Error::Placement("no reachable target position".into()))?;
            let (scale, angle) = jitter(rng, cfg);
            placements.push(Placement { sprite: target_sprite, shape_id: task.shape, color_id: task.color, position, scale, angle, is_clutter: false });
            vec![position]
        }
    };
    let count = rng.gen_range(cfg.clutter_min..=cfg.clutter_max);
    placements.extend(sample_clutter(library, task, count, &keep_out, cfg, rng)?);
    Ok(placements)
}

/// Builds the augmented frames for one source frame under a precomputed plan.
pub fn augment_with_plan(source: &Frame, source_kind: &SourceKind, task: &TaskSpec, plan: &[Placement], library: &SpriteLibrary, table: &Rect) -> Result<AugmentedSet> {
    let (synthetic, clutter): (Vec<Placement>, Vec<Placement>) = plan.iter().cloned().partition(|p| !p.is_clutter);
    let mut set = AugmentedSet { task: Some(*task), placements: plan.to_vec(), ..AugmentedSet::default() };
    match source_kind {
        SourceKind::Demo { .. } => {
            set.o_d = Some(source.clone().with_kind(FrameKind::Demo));
            set.o_da = Some(apply_placements(source, &clutter, library, table)?.with_kind(FrameKind::DemoAug));
        }
        SourceKind::Empty => {
            let o_ea = apply_placements(source, &synthetic, library, table)?.with_kind(FrameKind::EmptyAug);
            set.o_eac = Some(apply_placements(&o_ea, &clutter, library, table)?.with_kind(FrameKind::EmptyAugClutter));
            set.o_e = Some(source.clone().with_kind(FrameKind::Empty));
            set.o_ea = Some(o_ea);
        }
    }
    Ok(set)
}

/// Plans and applies an augmentation for a single source frame.
pub fn make_augmented_set<R: Rng>(
    sim: &Sim,
    source: &Frame,
    source_kind: &SourceKind,
    task: &TaskSpec,
    library: &SpriteLibrary,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedSet> {
    let plan = plan_augmentation(sim, source_kind, task, library, cfg, rng)?;
    augment_with_plan(source, source_kind, task, &plan, library, &sim.cfg.table)
}

/// Render of 2..=5 real objects (with shadows) and a random arm pose, no designated target.
pub fn make_real_clutter<R: Rng>(sim: &Sim, cfg: &AugmentConfig, resolution: usize, rng: &mut R) -> Result<(Frame, Scene)> {
    let count = rng.gen_range(cfg.real_clutter_min..=cfg.real_clutter_max);
    let scene = sim.real_clutter_scene(rng, count)?;
    let frame = crate::sim::render::render(sim, &scene, resolution, FrameKind::RealClutter)?;
    Ok((frame, scene))
}
