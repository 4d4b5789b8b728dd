use std::collections::BTreeMap;

use super::image::{LabelMap, RgbImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CellCropConfig {
    /// Fractional bounding-box expansion on every side.
    pub margin: f64,
    pub out_size: usize,
    /// Labels covering fewer pixels are skipped.
    pub min_pixels: usize,
}

impl Default for CellCropConfig {
    fn default() -> Self {
        Self {
            margin: 0.12,
            out_size: 224,
            min_pixels: 16,
        }
    }
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

#[derive(Clone, Debug)]
pub struct CellCrop {
    pub label: u16,
    /// Tight box around the label.
    pub bbox: BBox,
    pub pixel_count: usize,
    pub image: RgbImage,
}

#[derive(Clone, Debug, Default)]
pub struct CellCrops {
    pub crops: Vec<CellCrop>,
    /// Labels dropped for having fewer than `min_pixels` pixels.
    pub skipped: usize,
}

/// Per-channel median of the outermost pixel ring.
pub fn median_border_color(img: &RgbImage) -> [u8; 3] {
    let mut ch: [Vec<u8>; 3] = Default::default();
    let mut push = |x: usize, y: usize| {
        let p = img.get(x, y);
        for c in 0..3 {
            ch[c].push(p[c]);
        }
    };
    for x in 0..img.width {
        push(x, 0);
        if img.height > 1 {
            push(x, img.height - 1);
        }
    }
    for y in 1..img.height.saturating_sub(1) {
        push(0, y);
        if img.width > 1 {
            push(img.width - 1, y);
        }
    }
    let mut out = [0u8; 3];
    for c in 0..3 {
        ch[c].sort_unstable();
        out[c] = ch[c][ch[c].len() / 2];
    }
    out
}

/// One crop per nonzero label: tight box, expanded by `margin` per side,
/// clamped to the image, padded to a square with the median border color,
/// resized to `out_size`. Crops are ordered by label.
pub fn extract_cells(img: &RgbImage, mask: &LabelMap, cfg: &CellCropConfig) -> Result<CellCrops> {
    if mask.width != img.width || mask.height != img.height {
        return Err(Error::Shape(format!(
            "mask {}×{} does not match image {}×{}",
            mask.width, mask.height, img.width, img.height
        )));
    }
    let mut boxes: BTreeMap<u16, (BBox, usize)> = BTreeMap::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let l = mask.get(x, y);
            if l == 0 {
                continue;
            }
            let e = boxes.entry(l).or_insert((
                BBox {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                },
                0,
            ));
            e.0.x0 = e.0.x0.min(x);
            e.0.y0 = e.0.y0.min(y);
            e.0.x1 = e.0.x1.max(x);
            e.0.y1 = e.0.y1.max(y);
            e.1 += 1;
        }
    }
    let pad = median_border_color(img);
    let mut out = CellCrops::default();
    for (label, (bbox, count)) in boxes {
        if count < cfg.min_pixels {
            out.skipped += 1;
            continue;
        }
        let mx = (bbox.width() as f64 * cfg.margin).round() as usize;
        let my = (bbox.height() as f64 * cfg.margin).round() as usize;
        let x0 = bbox.x0.saturating_sub(mx);
        let y0 = bbox.y0.saturating_sub(my);
        let x1 = (bbox.x1 + mx).min(img.width - 1);
        let y1 = (bbox.y1 + my).min(img.height - 1);
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let side = w.max(h);
        let mut square = RgbImage::filled(side, side, pad);
        let (ox, oy) = ((side - w) / 2, (side - h) / 2);
        for y in 0..h {
            for x in 0..w {
                square.put(ox + x, oy + y, img.get(x0 + x, y0 + y));
            }
        }
        out.crops.push(CellCrop {
            label,
            bbox,
            pixel_count: count,
            image: square.resize(cfg.out_size, cfg.out_size),
        });
    }
    if out.skipped > 0 {
        log::warn!("skipped {} labels below {} pixels", out.skipped, cfg.min_pixels);
    }
    Ok(out)
}
