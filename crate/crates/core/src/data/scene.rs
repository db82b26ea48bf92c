//! Procedural multi-scale scenes with pixel-exact labels.
//!
//! Object classes come in pairs that share a hue and differ only in shape
//! (rectangle vs disk), so telling them apart at large sizes needs spatial
//! context beyond the local color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RareClass {
    pub id: u8,
    /// Expected fraction of pixels carrying this class.
    pub target_freq: f64,
    /// Side of the square the rare disk is drawn in, in pixels.
    #[serde(default = "RareClass::default_size")]
    pub size: usize,
}

impl RareClass {
    fn default_size() -> usize {
        6
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub classes: usize,
    pub canvas: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Object side range as a fraction of the canvas.
    pub scale_min: f64,
    pub scale_max: f64,
    pub rare: Option<RareClass>,
    /// Amplitude of the uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            classes: 5,
            canvas: 64,
            shapes_min: 1,
            shapes_max: 4,
            scale_min: 0.1,
            scale_max: 0.7,
            rare: None,
            noise: 0.08,
            seed: 0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disk,
}

/// Hue and shape of an object class; classes `2i+1` and `2i+2` share a hue.
/// Hue of the rare class, unused by [`class_appearance`] for the first twelve classes.
pub const RARE_HUE: f64 = 90.0;

pub fn class_appearance(class: u8) -> (f64, ShapeKind) {
    const HUES: [f64; 6] = [0.0, 120.0, 240.0, 60.0, 180.0, 300.0];
    let k = (class as usize).saturating_sub(1);
    let hue = HUES[(k / 2) % HUES.len()] + 20.0 * (k / 12) as f64;
    let kind = if k % 2 == 0 {
        ShapeKind::Rect
    } else {
        ShapeKind::Disk
    };
    (hue, kind)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn disk_contains(cy: f64, cx: f64, r: f64, y: usize, x: usize) -> bool {
    let dy = y as f64 + 0.5 - cy;
    let dx = x as f64 + 0.5 - cx;
    dy * dy + dx * dx <= r * r
}

/// Pixels covered by the rare class's disk.
pub fn rare_disk_area(size: usize) -> usize {
    let r = size as f64 / 2.0;
    (0..size)
        .flat_map(|y| (0..size).map(move |x| (y, x)))
        .filter(|&(y, x)| disk_contains(r, r, r, y, x))
        .count()
}

impl SceneConfig {
    pub fn object_classes(&self) -> Vec<u8> {
        let rare = self.rare.as_ref().map(|r| r.id);
        (1..self.classes as u8)
            .filter(|&c| Some(c) != rare)
            .collect()
    }

    /// Per-scene probability of drawing the rare object.
    pub fn rare_probability(&self) -> Option<f64> {
        let r = self.rare.as_ref()?;
        let pixels = (self.canvas * self.canvas) as f64;
        Some(r.target_freq * pixels / rare_disk_area(r.size) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.classes) {
            return Err(Error::config(format!(
                "scene classes must be in 2..=255, got {}",
                self.classes
            )));
        }
        if self.canvas < 8 {
            return Err(Error::config(format!(
                "canvas {} is smaller than 8 pixels",
                self.canvas
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::config("shapes_min exceeds shapes_max"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::config(format!(
                "scale range [{}, {}] must lie in (0, 1]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config(format!(
                "noise amplitude {} outside [0, 0.5]",
                self.noise
            )));
        }
        if self.shapes_max > 0 && self.object_classes().is_empty() {
            return Err(Error::config("no object classes left to draw"));
        }
        if let Some(r) = &self.rare {
            if r.id == 0 || r.id as usize >= self.classes {
                return Err(Error::config(format!(
                    "rare class {} must be an object class",
                    r.id
                )));
            }
            if !(r.target_freq > 0.0 && r.target_freq < 1.0) {
                return Err(Error::config(format!(
                    "rare target frequency {} outside (0, 1)",
                    r.target_freq
                )));
            }
            if r.size == 0 || r.size > self.canvas {
                return Err(Error::config(format!(
                    "rare object size {} does not fit the canvas",
                    r.size
                )));
            }
            let p = self.rare_probability().unwrap_or(0.0);
            if p > 1.0 {
                return Err(Error::config(format!(
                    "rare target frequency {} needs more than one {}px object per scene",
                    r.target_freq, r.size
                )));
            }
        }
        Ok(())
    }
}

fn paint(
    image: &mut Tensor,
    labels: &mut LabelMap,
    rng: &mut ChaCha8Rng,
    class: u8,
    (hue, kind): (f64, ShapeKind),
    (y0, x0, h, w): (f64, f64, f64, f64),
    noise: f64,
) {
    let value = rng.random_range(0.75..0.95);
    let color = hsv_to_rgb(hue, 0.85, value);
    let n = image.shape().h;
    let ys = (y0.floor().max(0.0) as usize)..((y0 + h).ceil().min(n as f64) as usize);
    let xs = (x0.floor().max(0.0) as usize)..((x0 + w).ceil().min(n as f64) as usize);
    let (cy, cx, r) = (y0 + h / 2.0, x0 + w / 2.0, h.min(w) / 2.0);
    for y in ys {
        for x in xs.clone() {
            let inside = match kind {
                ShapeKind::Rect => {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    py >= y0 && py < y0 + h && px >= x0 && px < x0 + w
                }
                ShapeKind::Disk => disk_contains(cy, cx, r, y, x),
            };
            if inside {
                labels.set(y, x, class);
                for (c, &v) in color.iter().enumerate() {
                    image.set(0, c, y, x, v + noise * rng.random_range(-1.0..1.0));
                }
            }
        }
    }
}

/// Scene `index` of the stream defined by `cfg`; a pure function of
/// `(cfg, index)`. Pixel values are quantized to multiples of 1/255.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.canvas;
    let gray = rng.random_range(0.25..0.55);
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
    let mut image = Tensor::zeros(Shape::new(1, 3, n, n));
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                image.set(
                    0,
                    c,
                    y,
                    x,
                    gray + tint[c] + cfg.noise * rng.random_range(-1.0..1.0),
                );
            }
        }
    }
    let mut labels = LabelMap::filled(n, n, 0);
    let objects = cfg.object_classes();
    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let (lo, hi) = (cfg.scale_min.ln(), cfg.scale_max.ln());
    for _ in 0..count {
        let class = objects[rng.random_range(0..objects.len())];
        let (_, kind) = class_appearance(class);
        let side = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
        .exp()
            * n as f64;
        let aspect = if kind == ShapeKind::Rect {
            rng.random_range(0.6f64.ln()..(1.0f64 / 0.6).ln()).exp()
        } else {
            1.0
        };
        let h = (side * aspect.sqrt()).max(2.0);
        let w = (side / aspect.sqrt()).max(2.0);
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        paint(
            &mut image,
            &mut labels,
            &mut rng,
            class,
            class_appearance(class),
            (cy - h / 2.0, cx - w / 2.0, h, w),
            cfg.noise,
        );
    }
    if let (Some(r), Some(p)) = (&cfg.rare, cfg.rare_probability()) {
        if rng.random_bool(p) {
            let y0 = rng.random_range(0..=n - r.size) as f64;
            let x0 = rng.random_range(0..=n - r.size) as f64;
            let s = r.size as f64;
            paint(
                &mut image,
                &mut labels,
                &mut rng,
                r.id,
                (RARE_HUE, ShapeKind::Disk),
                (y0, x0, s, s),
                cfg.noise,
            );
        }
    }
    let image = image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    Sample::new(image, labels)
}
