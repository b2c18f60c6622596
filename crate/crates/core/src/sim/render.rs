//! Software rasterizer producing RGB observation frames.

use alloc::vec;
use alloc::vec::Vec;

use super::{Scene, SceneObject, Sim};
use crate::error::{bail, Result};
use crate::real::Real;

/// Which observation class (or network output) a frame holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameKind {
    Demo,
    DemoAug,
    Empty,
    EmptyAug,
    EmptyAugClutter,
    RealClutter,
    Reconstruction,
    Masked,
    MaskedReconstruction,
}

impl FrameKind {
    pub const ALL: [FrameKind; 9] = [
        FrameKind::Demo,
        FrameKind::DemoAug,
        FrameKind::Empty,
        FrameKind::EmptyAug,
        FrameKind::EmptyAugClutter,
        FrameKind::RealClutter,
        FrameKind::Reconstruction,
        FrameKind::Masked,
        FrameKind::MaskedReconstruction,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FrameKind::Demo => "O_D",
            FrameKind::DemoAug => "O_DA",
            FrameKind::Empty => "O_E",
            FrameKind::EmptyAug => "O_EA",
            FrameKind::EmptyAugClutter => "O_EAC",
            FrameKind::RealClutter => "O_RC",
            FrameKind::Reconstruction => "O_REC",
            FrameKind::Masked => "M",
            FrameKind::MaskedReconstruction => "M_REC",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.tag() == tag)
    }
}

/// Row-major RGB image, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub kind: FrameKind,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, kind: FrameKind) -> Self {
        Self { width, height, kind, data: vec![0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, kind: FrameKind, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            bail!(Dimension, "{} bytes for a {width}x{height} RGB frame", data.len());
        }
        Ok(Self { width, height, kind, data })
    }

    pub fn with_kind(mut self, kind: FrameKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` floats in `[0, 1]`.
    pub fn to_chw<T: Real>(&self) -> Vec<T> {
        let n = self.width * self.height;
        let mut out = vec![T::zero(); 3 * n];
        let scale = T::lit(1.0 / 255.0);
        for (p, rgb) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = T::lit(rgb[c] as f64) * scale;
            }
        }
        out
    }

    /// Inverse of [`Frame::to_chw`], rounding to the nearest byte.
    pub fn from_chw<T: Real>(chw: &[T], width: usize, height: usize, kind: FrameKind) -> Result<Self> {
        let n = width * height;
        if chw.len() != 3 * n {
            bail!(Dimension, "{} values for a {width}x{height} RGB frame", chw.len());
        }
        let mut f = Self::new(width, height, kind);
        for p in 0..n {
            for c in 0..3 {
                f.data[p * 3 + c] = to_byte(chw[c * n + p].as_f64());
            }
        }
        Ok(f)
    }

    /// Pixel indices (`y * width + x`) where the two frames differ.
    pub fn diff_support(&self, other: &Frame) -> Vec<usize> {
        self.data.chunks_exact(3).zip(other.data.chunks_exact(3)).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect()
    }
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub table: [f64; 3],
    pub shadow: [f64; 3],
    pub arm: [f64; 3],
    pub joint: [f64; 3],
    pub open: [f64; 3],
    pub closed: [f64; 3],
    pub colors: Vec<[f64; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            table: [0.55, 0.47, 0.36],
            shadow: [0.2, 0.16, 0.12],
            arm: [0.2, 0.2, 0.22],
            joint: [0.45, 0.45, 0.48],
            open: [0.95, 0.85, 0.15],
            closed: [0.95, 0.5, 0.1],
            colors: vec![[0.85, 0.13, 0.1], [0.96, 0.96, 0.94], [0.12, 0.3, 0.85]],
        }
    }
}

impl Palette {
    /// Color for an id; ids past the configured list get evenly spaced hues.
    pub fn color(&self, id: usize) -> [f64; 3] {
        if let Some(c) = self.colors.get(id) {
            return *c;
        }
        let h = (id as f64 * 0.618_034) % 1.0;
        hue(h)
    }
}

fn hue(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        0.85 - 0.7 * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Whether the local offset `(dx, dy)` lies inside shape `shape_id` of radius `r`.
pub fn shape_contains(shape_id: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape_id {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() + dy.abs() <= r * 1.15,
        2 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        3 => dx.abs() <= r * 0.82 && dy.abs() <= r * 0.82,
        n => {
            // regular polygon with n + 1 sides
            let sides = (n + 1) as f64;
            let a = libm::atan2(dy, dx);
            let sector = core::f64::consts::TAU / sides;
            let local = a - sector * libm::floor(a / sector) - sector / 2.0;
            libm::hypot(dx, dy) * libm::cos(local) <= r * libm::cos(sector / 2.0)
        }
    }
}

/// Shading multiplier for a point on the object: bowls have a darker inner well.
fn shape_shade(shape_id: usize, dx: f64, dy: f64, r: f64) -> f64 {
    if shape_id == 0 && dx * dx + dy * dy <= (0.6 * r) * (0.6 * r) {
        0.72
    } else {
        1.0
    }
}

/// Supersampled float canvas in world coordinates.
pub(crate) struct Canvas {
    pub w: usize,
    pub h: usize,
    pub ss: usize,
    pub x0: f64,
    pub y0: f64,
    pub sx: f64,
    pub sy: f64,
    pub rgb: Vec<f64>,
}

impl Canvas {
    pub fn new(w: usize, h: usize, bounds: &super::Rect, background: [f64; 3]) -> Self {
        let mut rgb = vec![0.0; w * h * 3];
        for px in rgb.chunks_exact_mut(3) {
            px.copy_from_slice(&background);
        }
        Self { w, h, ss: 2, x0: bounds.x0, y0: bounds.y1, sx: bounds.width() / w as f64, sy: bounds.height() / h as f64, rgb }
    }

    /// Blends `color` over every pixel by the fraction of subsamples where `shade` returns `Some`.
    pub fn fill(&mut self, bbox: (f64, f64, f64, f64), color: [f64; 3], alpha: f64, shade: impl Fn(f64, f64) -> Option<f64>) {
        let (bx0, by0, bx1, by1) = bbox;
        let c0 = libm::floor((bx0 - self.x0) / self.sx).max(0.0) as usize;
        let c1 = libm::ceil((bx1 - self.x0) / self.sx).min(self.w as f64).max(0.0) as usize;
        let r0 = libm::floor((self.y0 - by1) / self.sy).max(0.0) as usize;
        let r1 = libm::ceil((self.y0 - by0) / self.sy).min(self.h as f64).max(0.0) as usize;
        let n = (self.ss * self.ss) as f64;
        for row in r0..r1 {
            for col in c0..c1 {
                let mut cover = 0.0;
                let mut tone = 0.0;
                for sy in 0..self.ss {
                    for sx in 0..self.ss {
                        let x = self.x0 + (col as f64 + (sx as f64 + 0.5) / self.ss as f64) * self.sx;
                        let y = self.y0 - (row as f64 + (sy as f64 + 0.5) / self.ss as f64) * self.sy;
                        if let Some(s) = shade(x, y) {
                            cover += 1.0;
                            tone += s;
                        }
                    }
                }
                if cover == 0.0 {
                    continue;
                }
                let a = alpha * cover / n;
                let s = tone / cover;
                let i = (row * self.w + col) * 3;
                for (px, &c) in self.rgb[i..i + 3].iter_mut().zip(color.iter()) {
                    *px = *px * (1.0 - a) + c * s * a;
                }
            }
        }
    }

    pub fn into_frame(self, kind: FrameKind) -> Frame {
        let data = self.rgb.iter().map(|&v| to_byte(v)).collect();
        Frame { width: self.w, height: self.h, kind, data }
    }
}

fn disc(canvas: &mut Canvas, c: (f64, f64), r: f64, color: [f64; 3]) {
    canvas.fill((c.0 - r, c.1 - r, c.0 + r, c.1 + r), color, 1.0, |x, y| ((x - c.0) * (x - c.0) + (y - c.1) * (y - c.1) <= r * r).then_some(1.0));
}

fn capsule(canvas: &mut Canvas, a: (f64, f64), b: (f64, f64), r: f64, color: [f64; 3]) {
    let bbox = (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (vx * vx + vy * vy).max(1e-12);
    canvas.fill(bbox, color, 1.0, |x, y| {
        let t = (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0);
        let (dx, dy) = (x - a.0 - t * vx, y - a.1 - t * vy);
        (dx * dx + dy * dy <= r * r).then_some(1.0)
    });
}

/// Draws one object centered at `c` with radius `r`, rotated by `angle`.
pub(crate) fn draw_object(canvas: &mut Canvas, shape_id: usize, color: [f64; 3], c: (f64, f64), r: f64, angle: f64) {
    let reach = r * 1.2;
    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    canvas.fill((c.0 - reach, c.1 - reach, c.0 + reach, c.1 + reach), color, 1.0, |x, y| {
        let (wx, wy) = (x - c.0, y - c.1);
        let (dx, dy) = (ca * wx + sa * wy, -sa * wx + ca * wy);
        shape_contains(shape_id, dx, dy, r).then(|| shape_shade(shape_id, dx, dy, r))
    });
}

const ARM_RADIUS: f64 = 0.022;

/// Renders `scene` at `res`×`res`. Z-order: table, shadows, resting objects, held object, arm.
pub fn render(sim: &Sim, scene: &Scene, res: usize, kind: FrameKind) -> Result<Frame> {
    render_with(sim, scene, res, kind, &Palette::default())
}

pub fn render_with(sim: &Sim, scene: &Scene, res: usize, kind: FrameKind, palette: &Palette) -> Result<Frame> {
    if res < 32 {
        bail!(Size, "resolution {res} is below 32");
    }
    let mut canvas = Canvas::new(res, res, &scene.table, palette.table);
    let lift = scene.arm.lift();
    let scale = |o: &SceneObject| if o.grabbed { o.size * (1.0 + 0.3 * lift) } else { o.size };
    let offset = |o: &SceneObject| if o.grabbed { 0.02 + 0.05 * lift } else { 0.02 };
    for o in &scene.objects {
        let d = offset(o);
        let (cx, cy) = (o.position.0 + d, o.position.1 - d);
        let r = scale(o);
        let reach = r * 1.2;
        canvas.fill((cx - reach, cy - reach, cx + reach, cy + reach), palette.shadow, 0.45, |x, y| shape_contains(o.shape_id, x - cx, y - cy, r).then_some(1.0));
    }
    let (held, resting): (Vec<&SceneObject>, Vec<&SceneObject>) = scene.objects.iter().partition(|o| o.grabbed);
    for o in resting.into_iter().chain(held) {
        draw_object(&mut canvas, o.shape_id, palette.color(o.color_id), o.position, scale(o), 0.0);
    }
    let points = sim.arm_points(&scene.arm);
    let base = points[0];
    canvas.fill((base.0 - 0.07, base.1 - 0.01, base.0 + 0.07, base.1 + 0.05), palette.arm, 1.0, |x, y| ((x - base.0).abs() <= 0.07 && y <= base.1 + 0.05).then_some(1.0));
    for pair in points.windows(2) {
        capsule(&mut canvas, pair[0], pair[1], ARM_RADIUS, palette.arm);
    }
    for p in &points[1..points.len() - 1] {
        disc(&mut canvas, *p, ARM_RADIUS * 0.6, palette.joint);
    }
    let eff = *points.last().unwrap();
    let grip = if scene.arm.closed() { palette.closed } else { palette.open };
    disc(&mut canvas, eff, sim.cfg.effector_radius * (0.7 + 0.6 * lift), grip);
    Ok(canvas.into_frame(kind))
}

/// RGBA patch of a single object without shadow, `size`×`size` pixels, alpha from coverage.
pub fn object_patch(shape_id: usize, color: [f64; 3], radius_px: f64, size: usize, angle: f64) -> Vec<[f64; 4]> {
    let bounds = super::Rect { x0: 0.0, y0: 0.0, x1: size as f64, y1: size as f64 };
    let mut cover = Canvas::new(size, size, &bounds, [0.0; 3]);
    let c = (size as f64 / 2.0, size as f64 / 2.0);
    draw_object(&mut cover, shape_id, [1.0; 3], c, radius_px, angle);
    let mut paint = Canvas::new(size, size, &bounds, [0.0; 3]);
    draw_object(&mut paint, shape_id, color, c, radius_px, angle);
    cover
        .rgb
        .chunks_exact(3)
        .zip(paint.rgb.chunks_exact(3))
        .map(|(a, p)| {
            let alpha = a[0];
            if alpha <= 0.0 {
                [0.0; 4]
            } else {
                [p[0] / alpha, p[1] / alpha, p[2] / alpha, alpha]
            }
        })
        .collect()
}
