//! Image ingestion, sample extraction (smear patches or single-cell crops),
//! multi-crop augmentation and the synthetic smear generator.

pub mod augment;
pub mod cells;
pub mod image;
pub mod manifest;
pub mod patchify;
pub mod synthetic;

use crate::error::{Error, Result};

pub use augment::{multicrop, Augmentation, CropSpec};
pub use cells::{extract_cells, CellCropConfig, CellCrops};
pub use image::{FloatImage, LabelMap, RgbImage};
pub use manifest::{FieldRecord, Manifest, ManifestRecord, SampleKind};
pub use patchify::{patch_grid, patchify, PatchGrid, PATCH_SIZE};
pub use synthetic::{gen_synthetic, render_field, SynthConfig, SyntheticSample};

/// A stained smear micrograph tagged with its acquisition source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmearImage {
    pub image: RgbImage,
    pub source_id: String,
    pub image_id: String,
}

impl SmearImage {
    pub fn new(image: RgbImage, source_id: impl Into<String>, image_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if image.width == 0 || image.height == 0 {
            return Err(Error::Param("image must have positive width and height".into()));
        }
        if source_id.is_empty() {
            return Err(Error::Param("source_id must be nonempty".into()));
        }
        Ok(Self {
            image,
            source_id,
            image_id: image_id.into(),
        })
    }
}
