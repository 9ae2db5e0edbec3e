//! Skin background texture, lesion coloring, and mask derivation.

use crate::colors::{ColorBank, ColorName, COLOR_COUNT};
use crate::mask::{Boundary, Mask};
use crate::noise::{region_quantile, threshold_field, value_noise, NoiseParams};
use crate::palette::{SkinTonePalette, TONE_COUNT};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    pub noise: NoiseParams,
    pub threshold: f64,
    pub morph_radius: usize,
    /// Per-pixel, per-channel uniform offset bound.
    pub jitter: u8,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            threshold: 0.5,
            morph_radius: 1,
            jitter: 4,
        }
    }
}

/// Shape of the regions carved out of the lesion for non-base colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubRegionConfig {
    pub noise: NoiseParams,
    /// Bounds on the share of the still-available lesion area a new color takes.
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub morph_radius: usize,
    pub max_attempts: usize,
}

impl Default for SubRegionConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams {
                cell: 10.0,
                octaves: 2,
                persistence: 0.5,
            },
            min_fraction: 0.25,
            max_fraction: 0.5,
            morph_radius: 1,
            max_attempts: 16,
        }
    }
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, base: [u8; 3], bound: u8) -> [u8; 3] {
    if bound == 0 {
        return base;
    }
    let b = bound as i32;
    base.map(|c| (c as i32 + rng.gen_range(-b..=b)).clamp(0, 255) as u8)
}

/// Skin background from two consecutive palette tones: tone `i` fills the
/// frame, a noise texture is recolored with tone `i + 1`, then every pixel
/// gets a small jitter. Returns the image and `i`.
pub fn gen_background<R: Rng + ?Sized>(
    rng: &mut R,
    palette: &SkinTonePalette,
    width: usize,
    height: usize,
    cfg: &BackgroundConfig,
) -> (RgbImage, usize) {
    let i = rng.gen_range(0..TONE_COUNT - 1);
    let (base, second) = (palette.tone(i), palette.tone(i + 1));
    let texture = value_noise(rng, width, height, &cfg.noise);
    let regions = threshold_field(&texture, cfg.threshold, cfg.morph_radius);
    let mut img = RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let tone = if regions.get(x, y) { second } else { base };
            img.put_pixel(x as u32, y as u32, image::Rgb(jittered(rng, tone, cfg.jitter)));
        }
    }
    (img, i)
}

/// A noise blob covering part of `region`, or `None` if every attempt came
/// out empty after morphological cleanup.
pub fn sub_region<R: Rng + ?Sized>(rng: &mut R, region: &Mask, cfg: &SubRegionConfig) -> Option<Mask> {
    if region.is_empty() {
        return None;
    }
    for _ in 0..cfg.max_attempts.max(1) {
        let field = value_noise(rng, region.width(), region.height(), &cfg.noise);
        let fraction = rng.gen_range(cfg.min_fraction..=cfg.max_fraction);
        let threshold = region_quantile(&field, region, fraction)?;
        let candidate = threshold_field(&field, threshold, cfg.morph_radius).intersect(region);
        // the region must not be swallowed whole; the previous color keeps some area
        if !candidate.is_empty() && candidate.count() < region.count() {
            return Some(candidate);
        }
    }
    None
}

/// Paints `combo` into the lesion and returns the image with one mask per
/// color (indexed by [`ColorName::index`]).
///
/// The first color fills `lesion`. Each further color claims a sub-region of
/// the area still showing the base color, restricted to `attribute` when that
/// leaves any room. A color whose sub-region cannot be formed is dropped, and
/// its mask stays empty.
pub fn apply_lesion_colors<R: Rng + ?Sized>(
    background: &RgbImage,
    lesion: &Mask,
    attribute: Option<&Mask>,
    combo: &[ColorName],
    bank: &ColorBank,
    sub: &SubRegionConfig,
    rng: &mut R,
) -> (RgbImage, [Mask; COLOR_COUNT]) {
    let (w, h) = (lesion.width(), lesion.height());
    let mut masks: [Mask; COLOR_COUNT] = std::array::from_fn(|_| Mask::empty(w, h));
    let Some((&base, rest)) = combo.split_first() else {
        return (background.clone(), masks);
    };
    masks[base.index()] = lesion.clone();
    let mut remaining = lesion.clone();
    for &color in rest {
        let candidates = match attribute {
            Some(attr) => {
                let c = remaining.intersect(attr);
                if c.is_empty() {
                    remaining.clone()
                } else {
                    c
                }
            }
            None => remaining.clone(),
        };
        if let Some(region) = sub_region(rng, &candidates, sub) {
            remaining = remaining.minus(&region);
            masks[base.index()] = masks[base.index()].minus(&region);
            masks[color.index()] = region;
        }
    }
    let mut img = background.clone();
    for color in combo {
        let m = &masks[color.index()];
        if m.is_empty() {
            continue;
        }
        let region_rgb = jittered(rng, bank.anchors[color.index()], bank.jitter);
        for y in 0..h {
            for x in 0..w {
                if m.get(x, y) {
                    let px = jittered(rng, region_rgb, bank.pixel_jitter);
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
        }
    }
    (img, masks)
}

/// Lesion mask as the union of the color masks, and its border band as the
/// morphological gradient `dilate(lesion, r) XOR erode(lesion, r)`.
pub fn derive_masks(color_masks: &[Mask], radius: usize) -> (Mask, Mask) {
    let (w, h) = color_masks
        .first()
        .map(|m| (m.width(), m.height()))
        .unwrap_or((0, 0));
    let lesion = color_masks.iter().fold(Mask::empty(w, h), |acc, m| acc.union(m));
    let border = lesion
        .dilate(radius)
        .xor(&lesion.erode(radius, Boundary::Background));
    (lesion, border)
}
