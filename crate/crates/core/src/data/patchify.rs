use super::image::RgbImage;
use crate::error::{Error, Result};

pub const PATCH_SIZE: usize = 224;

/// Tiling geometry for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// Dimensions after the optional aspect-preserving upscale.
    pub width: usize,
    pub height: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// If the shorter side is below `patch`, both sides are scaled by the same
/// factor so the shorter side equals `patch`; otherwise the image is used
/// as is. Remainder margins beyond the last full tile are discarded.
pub fn patch_grid(width: usize, height: usize, patch: usize) -> Result<PatchGrid> {
    if width == 0 || height == 0 {
        return Err(Error::Param(format!("degenerate {width}×{height} image")));
    }
    if patch == 0 {
        return Err(Error::Param("patch size must be positive".into()));
    }
    let short = width.min(height);
    let (w, h) = if short < patch {
        let s = patch as f64 / short as f64;
        let scale = |v: usize| {
            if v == short {
                patch
            } else {
                (v as f64 * s).round() as usize
            }
        };
        (scale(width), scale(height))
    } else {
        (width, height)
    };
    Ok(PatchGrid {
        width: w,
        height: h,
        rows: h / patch,
        cols: w / patch,
    })
}

/// Non-overlapping `patch × patch` tiles in row-major order.
pub fn patchify(img: &RgbImage, patch: usize) -> Result<Vec<RgbImage>> {
    let g = patch_grid(img.width, img.height, patch)?;
    let scaled;
    let src = if g.width != img.width || g.height != img.height {
        scaled = img.resize(g.width, g.height);
        &scaled
    } else {
        img
    };
    let mut out = Vec::with_capacity(g.count());
    for r in 0..g.rows {
        for c in 0..g.cols {
            out.push(src.crop(c * patch, r * patch, patch, patch));
        }
    }
    Ok(out)
}
