//! Lesion-shape priors: procedural blobs or masks sampled from a directory.

use crate::error::{io_err, Result, SynSkinError};
use crate::mask::Mask;
use crate::noise::{threshold_field, value_noise, Field, NoiseParams};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MAX_BLOB_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionPriorConfig {
    /// When set, lesion masks are drawn from the PNG files in this directory.
    pub mask_dir: Option<PathBuf>,
    /// When set, attribute masks are drawn from this directory instead of
    /// being synthesized inside the lesion.
    pub attribute_mask_dir: Option<PathBuf>,
    pub noise: NoiseParams,
    /// Noise amplitude relative to the elliptic falloff; larger is more ragged.
    pub roughness: f64,
    pub morph_radius: usize,
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for LesionPriorConfig {
    fn default() -> Self {
        Self {
            mask_dir: None,
            attribute_mask_dir: None,
            noise: NoiseParams {
                cell: 12.0,
                octaves: 3,
                persistence: 0.5,
            },
            roughness: 0.35,
            morph_radius: 1,
            min_area: 0.05,
            max_area: 0.45,
        }
    }
}

#[derive(Debug, Clone)]
pub enum LesionSource {
    Procedural,
    Directory(Vec<Mask>),
}

/// Lesion prior ready for sampling at a fixed image size.
#[derive(Debug, Clone)]
pub struct LesionPrior {
    pub config: LesionPriorConfig,
    pub source: LesionSource,
    pub attributes: Option<Vec<Mask>>,
    width: usize,
    height: usize,
}

/// Loads every PNG in `dir` (sorted by file name) as a binary mask resized to
/// `width × height`.
pub fn load_mask_dir(dir: &Path, width: usize, height: usize) -> Result<Vec<Mask>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SynSkinError::EmptyMaskDir(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|source| SynSkinError::Image {
                    path: p.clone(),
                    source,
                })?
                .to_luma8();
            let m = Mask::from_gray(img.width() as usize, img.height() as usize, img.as_raw());
            Ok(m.resize_nearest(width, height))
        })
        .collect()
}

impl LesionPrior {
    pub fn new(config: LesionPriorConfig, width: usize, height: usize) -> Result<Self> {
        if !(0.0 <= config.min_area && config.min_area < config.max_area && config.max_area <= 1.0) {
            return Err(SynSkinError::Config(format!(
                "lesion area bounds [{}, {}] are not an interval in [0, 1]",
                config.min_area, config.max_area
            )));
        }
        let source = match &config.mask_dir {
            Some(dir) => LesionSource::Directory(load_mask_dir(dir, width, height)?),
            None => LesionSource::Procedural,
        };
        let attributes = match &config.attribute_mask_dir {
            Some(dir) => Some(load_mask_dir(dir, width, height)?),
            None => None,
        };
        Ok(Self {
            config,
            source,
            attributes,
            width,
            height,
        })
    }

    pub fn procedural(width: usize, height: usize) -> Self {
        Self::new(LesionPriorConfig::default(), width, height).expect("default prior is valid")
    }
}

/// Draws one lesion mask from `prior`.
///
/// Procedural blobs are a noisy elliptic field thresholded and cleaned,
/// reduced to their largest component with holes filled. Blobs outside the
/// configured area range are redrawn, up to [`MAX_BLOB_ATTEMPTS`] times.
pub fn sample_lesion_mask<R: Rng + ?Sized>(rng: &mut R, prior: &LesionPrior) -> Result<Mask> {
    if let LesionSource::Directory(masks) = &prior.source {
        return Ok(masks[rng.gen_range(0..masks.len())].clone());
    }
    let cfg = &prior.config;
    let (w, h) = (prior.width, prior.height);
    for _ in 0..MAX_BLOB_ATTEMPTS {
        let area = rng.gen_range(0.10..0.35) * (w * h) as f64;
        let aspect = rng.gen_range(0.65..1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let a = (area / (std::f64::consts::PI * aspect)).sqrt();
        let b = a * aspect;
        let cx = rng.gen_range(0.4..0.6) * w as f64;
        let cy = rng.gen_range(0.4..0.6) * h as f64;
        let noise = value_noise(rng, w, h, &cfg.noise);
        let (sin, cos) = angle.sin_cos();
        let values = (0..w * h)
            .map(|i| {
                let (dx, dy) = ((i % w) as f64 + 0.5 - cx, (i / w) as f64 + 0.5 - cy);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let score = 1.0 - (u * u + v * v).sqrt() + cfg.roughness * 2.0 * (noise.values[i] - 0.5);
                ((score + 1.0) / 2.0).clamp(0.0, 0.999_999)
            })
            .collect();
        let field = Field {
            width: w,
            height: h,
            values,
        };
        let blob = threshold_field(&field, 0.5, cfg.morph_radius)
            .largest_component()
            .fill_holes();
        let frac = blob.area_fraction();
        if !blob.is_empty() && frac >= cfg.min_area && frac <= cfg.max_area {
            return Ok(blob);
        }
    }
    Err(SynSkinError::DegenerateBlob(MAX_BLOB_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn procedural_blob_is_one_component_in_range() {
        let prior = LesionPrior::procedural(64, 64);
        for seed in 0..50 {
            let m = sample_lesion_mask(&mut ChaCha8Rng::seed_from_u64(seed), &prior).unwrap();
            assert_eq!(m.components().1, 1);
            let f = m.area_fraction();
            assert!((0.05..=0.45).contains(&f), "{f}");
        }
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LesionPriorConfig {
            mask_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        assert!(matches!(LesionPrior::new(cfg, 64, 64), Err(SynSkinError::EmptyMaskDir(_))));
    }

    #[test]
    fn single_file_directory_always_returns_it() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(16, 16, |x, y| x > 3 && x < 10 && y > 4 && y < 12);
        image::GrayImage::from_raw(16, 16, m.to_bytes())
            .unwrap()
            .save(dir.path().join("a.png"))
            .unwrap();
        let cfg = LesionPriorConfig {
            mask_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let prior = LesionPrior::new(cfg, 16, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(sample_lesion_mask(&mut rng, &prior).unwrap(), m);
        }
    }
}
