//! Random-resized multi-crop views and an ordered, configurable augmentation
//! chain.

use rand::Rng as _;

use super::image::FloatImage;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    HorizontalFlip {
        p: f64,
    },
    VerticalFlip {
        p: f64,
    },
    /// Brightness/contrast/saturation factors drawn from `1 ± magnitude`,
    /// plus an independent additive offset per channel in `±channel_shift`.
    ColorJitter {
        p: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        channel_shift: f64,
    },
    Grayscale {
        p: f64,
    },
    GaussianBlur {
        p: f64,
        sigma_min: f64,
        sigma_max: f64,
    },
    Solarize {
        p: f64,
        threshold: f64,
    },
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::HorizontalFlip { .. } => "hflip",
            Augmentation::VerticalFlip { .. } => "vflip",
            Augmentation::ColorJitter { .. } => "jitter",
            Augmentation::Grayscale { .. } => "gray",
            Augmentation::GaussianBlur { .. } => "blur",
            Augmentation::Solarize { .. } => "solarize",
        }
    }

    pub fn probability(&self) -> f64 {
        match *self {
            Augmentation::HorizontalFlip { p }
            | Augmentation::VerticalFlip { p }
            | Augmentation::ColorJitter { p, .. }
            | Augmentation::Grayscale { p }
            | Augmentation::GaussianBlur { p, .. }
            | Augmentation::Solarize { p, .. } => p,
        }
    }

    /// Applies the transform with its probability. A random draw is consumed
    /// for the gate even when `p` is 0 or 1, so stream positions do not
    /// depend on probabilities.
    pub fn apply(&self, img: &mut FloatImage, rng: &mut Rng) {
        let gate: f64 = rng.random();
        if gate >= self.probability() {
            return;
        }
        match *self {
            Augmentation::HorizontalFlip { .. } => flip(img, true),
            Augmentation::VerticalFlip { .. } => flip(img, false),
            Augmentation::ColorJitter {
                brightness,
                contrast,
                saturation,
                channel_shift,
                ..
            } => {
                let b = 1.0 + rng.random_range(-1.0..=1.0) * brightness;
                let c = 1.0 + rng.random_range(-1.0..=1.0) * contrast;
                let s = 1.0 + rng.random_range(-1.0..=1.0) * saturation;
                let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * channel_shift);
                color_jitter(img, b as f32, c as f32, s as f32, shift.map(|v| v as f32));
            }
            Augmentation::Grayscale { .. } => grayscale(img),
            Augmentation::GaussianBlur {
                sigma_min, sigma_max, ..
            } => {
                let sigma = if sigma_max > sigma_min {
                    rng.random_range(sigma_min..=sigma_max)
                } else {
                    sigma_min
                };
                blur(img, sigma);
            }
            Augmentation::Solarize { threshold, .. } => {
                let t = threshold as f32;
                img.data.iter_mut().for_each(|v| {
                    if *v >= t {
                        *v = 1.0 - *v
                    }
                });
            }
        }
    }
}

fn flip(img: &mut FloatImage, horizontal: bool) {
    let (w, h) = (img.width, img.height);
    let src = img.data.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if horizontal { (w - 1 - x, y) } else { (x, h - 1 - y) };
            let (d, s) = ((y * w + x) * 3, (sy * w + sx) * 3);
            img.data[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &mut FloatImage, brightness: f32, contrast: f32, saturation: f32, shift: [f32; 3]) {
    let n = (img.width * img.height) as f32;
    let mean_luma = img.data.chunks_exact(3).map(luma).sum::<f32>() / n.max(1.0);
    for p in img.data.chunks_exact_mut(3) {
        for (c, v) in p.iter_mut().enumerate() {
            *v = (*v * brightness + shift[c]).clamp(0.0, 1.0);
        }
        for v in p.iter_mut() {
            *v = ((*v - mean_luma) * contrast + mean_luma).clamp(0.0, 1.0);
        }
        let l = luma(p);
        for v in p.iter_mut() {
            *v = ((*v - l) * saturation + l).clamp(0.0, 1.0);
        }
    }
}

fn grayscale(img: &mut FloatImage) {
    for p in img.data.chunks_exact_mut(3) {
        let l = luma(p);
        p.fill(l);
    }
}

/// Separable Gaussian blur with clamped borders.
fn blur(img: &mut FloatImage, sigma: f64) {
    if !(sigma > 0.0) {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let ks: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / ks).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    for horizontal in [true, false] {
        let src = img.data.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, &kv) in k.iter().enumerate() {
                        let o = ki as isize - r;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h - 1))
                        };
                        acc += kv * src[((sy * w + sx) * 3) as usize + c];
                    }
                    img.data[((y * w + x) * 3) as usize + c] = acc;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropSpec {
    pub global_crops: usize,
    pub global_size: usize,
    pub global_scale: (f64, f64),
    pub local_crops: usize,
    pub local_size: usize,
    pub local_scale: (f64, f64),
    pub augmentations: Vec<Augmentation>,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            global_crops: 2,
            global_size: 64,
            global_scale: (0.4, 1.0),
            local_crops: 0,
            local_size: 32,
            local_scale: (0.05, 0.4),
            augmentations: default_chain(),
        }
    }
}

/// Flip, jitter, grayscale, blur and solarize, in that order.
pub fn default_chain() -> Vec<Augmentation> {
    vec![
        Augmentation::HorizontalFlip { p: 0.5 },
        Augmentation::VerticalFlip { p: 0.5 },
        Augmentation::ColorJitter {
            p: 0.8,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.2,
            channel_shift: 0.1,
        },
        Augmentation::Grayscale { p: 0.2 },
        Augmentation::GaussianBlur {
            p: 0.3,
            sigma_min: 0.1,
            sigma_max: 1.5,
        },
        Augmentation::Solarize { p: 0.1, threshold: 0.5 },
    ]
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.global_crops < 2 {
            return bad(format!(
                "at least 2 global crops are required, got {}",
                self.global_crops
            ));
        }
        if self.global_size == 0 || (self.local_crops > 0 && self.local_size == 0) {
            return bad("crop sizes must be positive".into());
        }
        for (name, (lo, hi)) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < lo ≤ hi ≤ 1, got [{lo}, {hi}]"));
            }
        }
        for a in &self.augmentations {
            if !(0.0..=1.0).contains(&a.probability()) {
                return bad(format!("{} probability outside [0, 1]", a.name()));
            }
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.global_crops + self.local_crops
    }
}

/// Random-resized crop: area fraction in `scale`, aspect ratio log-uniform in
/// `[3/4, 4/3]`, ten attempts, then the whole image.
pub fn random_resized_crop(img: &FloatImage, size: usize, scale: (f64, f64), rng: &mut Rng) -> FloatImage {
    let (w, h) = (img.width as f64, img.height as f64);
    let area = w * h;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let s = if scale.1 > scale.0 {
            rng.random_range(scale.0..=scale.1)
        } else {
            scale.0
        };
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (area * s * ratio).sqrt().round();
        let ch = (area * s / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng.random_range(0.0..=(w - cw)).floor();
            let y0 = rng.random_range(0.0..=(h - ch)).floor();
            return img.resize_region(x0, y0, cw, ch, size, size);
        }
    }
    img.resize(size, size)
}

/// Global views first, then local views.
pub fn multicrop(img: &FloatImage, spec: &CropSpec, rng: &mut Rng) -> Vec<FloatImage> {
    let mut views = Vec::with_capacity(spec.num_views());
    let plan = std::iter::repeat_n((spec.global_size, spec.global_scale), spec.global_crops).chain(
        std::iter::repeat_n((spec.local_size, spec.local_scale), spec.local_crops),
    );
    for (size, scale) in plan {
        let mut v = random_resized_crop(img, size, scale, rng);
        for a in &spec.augmentations {
            a.apply(&mut v, rng);
        }
        v.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        views.push(v);
    }
    views
}
