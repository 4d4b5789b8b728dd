//! Deterministic synthetic blood-smear fields.
//!
//! Every field holds cells of a single morphology class on a source-specific
//! background. Sources differ by an additive color tint, a zero-mean
//! illumination ramp and noise level, which stands in for the acquisition
//! batch effect. The renderer also returns the cell label map (usable with
//! [`super::cells::extract_cells`]) and a mask of parasite-overlay pixels.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::image::{LabelMap, RgbImage};
use super::SmearImage;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

pub const CLASS_NAMES: [&str; 8] = [
    "discocyte",
    "elliptocyte",
    "echinocyte",
    "ring_parasite",
    "spherocyte",
    "sickle",
    "target",
    "stomatocyte",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub sources: usize,
    pub classes: usize,
    pub seed: u64,
    pub field_size: usize,
    pub cells_per_field: usize,
    /// Mean cell radius in pixels.
    pub cell_radius: f64,
    /// Per-channel tint magnitude separating sources (in `[0, 1]` units).
    pub tint_delta: f64,
    /// Pixel noise standard deviation (in `[0, 1]` units).
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 24,
            sources: 2,
            classes: 3,
            seed: 0,
            field_size: 224,
            cells_per_field: 10,
            cell_radius: 16.0,
            tint_delta: 0.08,
            noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return bad(format!("classes must be in 1..=8, got {}", self.classes));
        }
        if self.sources == 0 || self.sources > 8 {
            return bad(format!("sources must be in 1..=8, got {}", self.sources));
        }
        if self.field_size < 16 || !(self.cell_radius >= 2.0) || self.cell_radius * 2.5 > self.field_size as f64 {
            return bad("field_size must be ≥ 16 and fit cells of the given radius".into());
        }
        if !(self.tint_delta >= 0.0) || !(self.noise >= 0.0) {
            return bad("tint_delta and noise must be non-negative".into());
        }
        Ok(())
    }

    /// Additive RGB tint of a source: `±0.6·tint_delta` per channel, signs from
    /// the bits of the source index, so any two sources differ by
    /// `1.2·tint_delta` in at least one channel.
    pub fn source_tint(&self, source: usize) -> [f64; 3] {
        std::array::from_fn(|c| {
            let sign = if (source >> c) & 1 == 1 { 1.0 } else { -1.0 };
            0.6 * self.tint_delta * sign
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: SmearImage,
    pub mask: LabelMap,
    /// Parasite-overlay pixels, row-major.
    pub overlay: Vec<bool>,
    pub class_index: usize,
    pub label: String,
}

pub fn source_name(s: usize) -> String {
    format!("source{s}")
}

/// Field `i` gets class `i mod classes` and source `(i / classes) mod sources`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    (0..cfg.n_images).map(|i| render_field(cfg, i)).collect()
}

struct Cell {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    spikes: f64,
    spike_phase: f64,
    ring: Option<(f64, f64, f64)>,
}

pub fn render_field(cfg: &SynthConfig, index: usize) -> Result<SyntheticSample> {
    cfg.validate()?;
    let class = index % cfg.classes;
    let source = (index / cfg.classes) % cfg.sources;
    let mut rng = stream(cfg.seed, &[0x5EED, index as u64]);
    let n = cfg.field_size;
    let cells = place_cells(cfg, class, &mut rng);

    let background = [0.93, 0.86, 0.88];
    let tint = cfg.source_tint(source);
    let ramp_dir = source as f64 * 1.3;
    let ramp = (0.03 * ramp_dir.cos(), 0.03 * ramp_dir.sin());
    let noise_sd = cfg.noise * (1.0 + 0.5 * (source % 2) as f64);
    let noise = Normal::new(0.0, noise_sd.max(1e-12)).expect("finite");

    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut labels = vec![0u16; n * n];
    let mut overlay = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = background;
            for (ci, cell) in cells.iter().enumerate() {
                if let Some((color, is_ring)) = shade(cell, class, px, py) {
                    rgb = color;
                    labels[y * n + x] = (ci + 1) as u16;
                    overlay[y * n + x] = is_ring;
                    break;
                }
            }
            let illum = ramp.0 * (px / n as f64 - 0.5) + ramp.1 * (py / n as f64 - 0.5);
            for c in 0..3 {
                let v = rgb[c] + tint[c] + illum + if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(SyntheticSample {
        image: SmearImage {
            image: RgbImage::new(n, n, pixels)?,
            source_id: source_name(source),
            image_id: format!("field{index:05}"),
        },
        mask: LabelMap::new(n, n, labels)?,
        overlay,
        class_index: class,
        label: CLASS_NAMES[class].to_string(),
    })
}

fn place_cells(cfg: &SynthConfig, class: usize, rng: &mut Rng) -> Vec<Cell> {
    let n = cfg.field_size as f64;
    let mut cells: Vec<Cell> = Vec::new();
    let mut attempts = 0;
    while cells.len() < cfg.cells_per_field && attempts < cfg.cells_per_field * 50 {
        attempts += 1;
        let r = cfg.cell_radius * rng.random_range(0.85..1.15);
        let (a, b) = match class {
            1 => (r * rng.random_range(1.35..1.6), r * rng.random_range(0.55..0.7)),
            4 => (r * 0.8, r * 0.8),
            5 => (r * 1.4, r * 0.75),
            _ => {
                let e = rng.random_range(0.95..1.05);
                (r * e, r / e)
            }
        };
        let margin = a.max(b) + 2.0;
        if n - margin <= margin {
            break;
        }
        let cx = rng.random_range(margin..n - margin);
        let cy = rng.random_range(margin..n - margin);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let spikes = rng.random_range(9.0..14.0f64).round();
        let spike_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let ring = (class == 3).then(|| {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(0.0..0.45);
            (d * t.cos(), d * t.sin(), rng.random_range(0.22..0.3))
        });
        let ext = a.max(b) * 1.2;
        if cells
            .iter()
            .all(|c| ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt() > ext + c.a.max(c.b) * 1.2 + 1.0)
        {
            cells.push(Cell {
                cx,
                cy,
                a,
                b,
                angle,
                spikes,
                spike_phase,
                ring,
            });
        }
    }
    cells
}

/// Color of `cell` at `(px, py)` and whether the pixel is parasite overlay;
/// `None` outside the cell.
fn shade(cell: &Cell, class: usize, px: f64, py: f64) -> Option<([f64; 3], bool)> {
    let (dx, dy) = (px - cell.cx, py - cell.cy);
    let ext = cell.a.max(cell.b) * 1.25;
    if dx.abs() > ext || dy.abs() > ext {
        return None;
    }
    let (s, c) = cell.angle.sin_cos();
    let u = (dx * c + dy * s) / cell.a;
    let v = (-dx * s + dy * c) / cell.b;
    let rho = (u * u + v * v).sqrt();
    let theta = v.atan2(u);
    let boundary = match class {
        2 => 1.0 + 0.16 * (cell.spikes * theta + cell.spike_phase).cos().max(0.0).powf(0.6) - 0.06,
        _ => 1.0,
    };
    if rho > boundary {
        return None;
    }
    if class == 5 {
        // crescent: carve out an offset disc
        let (cu, cv) = (u, v - 0.75);
        if (cu * cu + cv * cv).sqrt() < 0.8 {
            return None;
        }
    }
    let body = [0.78, 0.36, 0.42];
    let pallor = match class {
        4 => 0.0,
        6 => {
            let ring = (-((rho - 0.55) / 0.15).powi(2)).exp();
            let dot = (-(rho / 0.2).powi(2)).exp();
            0.45 * ring - 0.1 * dot
        }
        7 => 0.5 * (-(u / 0.5).powi(2) - (v / 0.12).powi(2)).exp(),
        _ => 0.4 * (-(rho / 0.45).powi(2)).exp(),
    };
    let density = if class == 4 { 0.85 } else { 1.0 };
    let mut color = [0.0; 3];
    for ch in 0..3 {
        let base = body[ch] * density;
        color[ch] = base + (0.95 - base) * pallor;
    }
    // membrane edge
    if rho > boundary - 0.08 {
        for v in &mut color {
            *v *= 0.88;
        }
    }
    if let Some((ru, rv, rr)) = cell.ring {
        let d = ((u - ru).powi(2) + (v - rv).powi(2)).sqrt();
        let on_ring = (d - rr).abs() < 0.07;
        let chromatin = ((u - ru - rr).powi(2) + (v - rv).powi(2)).sqrt() < 0.09;
        if on_ring || chromatin {
            return Some(([0.38, 0.16, 0.52], true));
        }
    }
    Some((color, false))
}
