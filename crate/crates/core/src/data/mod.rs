//! Samples, the synthetic phantom corpus, augmentation and splitting.

mod augment;
mod image;
mod manifest;
mod phantom;
mod split;

pub use augment::{apply_augmentation, augment, mean_normalize, AugmentConfig, AugmentParams};
pub use image::{load_png16, load_any_image, save_png16, Image};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestRecord, MANIFEST_SCHEMA_VERSION};
pub use phantom::{generate_corpus, generate_phantom, CorpusConfig, PhantomParams, PhantomRanges};
pub use split::{split_dataset, SplitSpec, Splits};

use serde::{Deserialize, Serialize};

use crate::geometry::LandmarkSet;

/// Side length of every stored sample image.
pub const IMAGE_SIZE: usize = 256;
/// Minimum landmark distance to any border, in pixels.
pub const BORDER_MARGIN: f64 = 16.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image is {width}x{height}, expected {IMAGE_SIZE}x{IMAGE_SIZE}")]
    ImageSize { width: usize, height: usize },
    #[error("landmark {index} at ({x:.2}, {y:.2}) is within {BORDER_MARGIN} px of the border")]
    Margin { index: usize, x: f64, y: f64 },
    #[error("invalid phantom parameters: {0}")]
    Phantom(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: String, line: usize, message: String },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        })
    }
}

/// One labeled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub patient_id: String,
    pub phase: Phase,
    pub source_id: String,
}

impl Sample {
    /// Checks the image size and the landmark margin.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image.width() != IMAGE_SIZE || self.image.height() != IMAGE_SIZE {
            return Err(DataError::ImageSize { width: self.image.width(), height: self.image.height() });
        }
        check_margin(&self.landmarks, IMAGE_SIZE, IMAGE_SIZE)
    }
}

pub fn check_margin(lm: &LandmarkSet, width: usize, height: usize) -> Result<(), DataError> {
    for (index, p) in lm.points.iter().enumerate() {
        if !p.is_finite() || p.border_distance(width, height) < BORDER_MARGIN {
            return Err(DataError::Margin { index, x: p.x, y: p.y });
        }
    }
    Ok(())
}

/// Mixes a global seed with an index (splitmix64 finalizer) so per-item
/// streams do not depend on iteration order or worker count.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    let mut z = global ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Landmarks on a raster downsampled by an integer `factor` (pixel-center aligned).
pub fn downscale_landmarks(lm: &LandmarkSet, factor: usize) -> LandmarkSet {
    let f = factor as f64;
    lm.map(|p| crate::geometry::PixelPoint::new((p.x + 0.5) / f - 0.5, (p.y + 0.5) / f - 0.5))
}

/// Inverse of [`downscale_landmarks`].
pub fn upscale_landmarks(lm: &LandmarkSet, factor: usize) -> LandmarkSet {
    let f = factor as f64;
    lm.map(|p| crate::geometry::PixelPoint::new((p.x + 0.5) * f - 0.5, (p.y + 0.5) * f - 0.5))
}
