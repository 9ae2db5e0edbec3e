//! Procedural generator for a synthetic dermoscopy-style dataset: skin-tone
//! backgrounds, lesion blobs painted with clinically named colors, and the
//! matching lesion, border and per-color masks.

pub mod colors;
pub mod dataset;
mod error;
pub mod lesion;
pub mod mask;
pub mod noise;
pub mod paint;
pub mod palette;
pub mod sample;

pub use colors::{ColorBank, ColorBankConfig, ColorName, Combo, COLOR_COUNT};
pub use dataset::{generate_dataset, load_sample, read_labels, read_manifest, LabelRow, Manifest, StoredSample};
pub use error::{Result, SynSkinError};
pub use lesion::{sample_lesion_mask, LesionPrior, LesionPriorConfig};
pub use mask::{Boundary, Mask};
pub use noise::{noise_texture, NoiseParams};
pub use paint::{apply_lesion_colors, derive_masks, gen_background};
pub use palette::{SkinTonePalette, TONE_COUNT};
pub use sample::{sample_seed, SynSample, SynSkinConfig, SynSkinGenerator};
