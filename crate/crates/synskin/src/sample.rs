use crate::colors::{ColorBank, ColorBankConfig, ColorName, COLOR_COUNT};
use crate::error::{Result, SynSkinError};
use crate::lesion::{sample_lesion_mask, LesionPrior, LesionPriorConfig};
use crate::mask::Mask;
use crate::noise::NoiseParams;
use crate::paint::{apply_lesion_colors, derive_masks, gen_background, sub_region, BackgroundConfig, SubRegionConfig};
use crate::palette::{PaletteConfig, SkinTonePalette};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stand-in attribute regions synthesized inside the lesion when no
/// attribute masks are supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub noise: NoiseParams,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams {
                cell: 14.0,
                octaves: 2,
                persistence: 0.5,
            },
            min_fraction: 0.5,
            max_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynSkinConfig {
    pub image_size: usize,
    pub border_radius: usize,
    pub palette: PaletteConfig,
    pub background: BackgroundConfig,
    pub lesion: LesionPriorConfig,
    pub attribute: AttributeConfig,
    pub subregion: SubRegionConfig,
    pub colors: ColorBankConfig,
}

impl Default for SynSkinConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            border_radius: 2,
            palette: PaletteConfig::default(),
            background: BackgroundConfig::default(),
            lesion: LesionPriorConfig::default(),
            attribute: AttributeConfig::default(),
            subregion: SubRegionConfig::default(),
            colors: ColorBankConfig::default(),
        }
    }
}

/// One generated image with its masks and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynSample {
    pub image: RgbImage,
    pub lesion_mask: Mask,
    pub border_mask: Mask,
    pub color_masks: [Mask; COLOR_COUNT],
    pub labels: [bool; COLOR_COUNT],
    pub seed: u64,
    pub combo: usize,
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` under `master_seed`.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    mix64(master_seed ^ mix64(index))
}

/// Validated generator state shared by all samples.
#[derive(Debug, Clone)]
pub struct SynSkinGenerator {
    pub config: SynSkinConfig,
    pub palette: SkinTonePalette,
    pub bank: ColorBank,
    pub prior: LesionPrior,
}

impl SynSkinGenerator {
    pub fn new(config: SynSkinConfig) -> Result<Self> {
        if config.image_size < 8 {
            return Err(SynSkinError::Config(format!(
                "image_size {} is too small",
                config.image_size
            )));
        }
        let sub = &config.subregion;
        if !(0.0 < sub.min_fraction && sub.min_fraction <= sub.max_fraction && sub.max_fraction < 1.0) {
            return Err(SynSkinError::Config("subregion fractions must satisfy 0 < min <= max < 1".into()));
        }
        let palette = SkinTonePalette::from_config(&config.palette)?;
        let bank = ColorBank::from_config(&config.colors)?;
        let prior = LesionPrior::new(config.lesion.clone(), config.image_size, config.image_size)?;
        Ok(Self {
            config,
            palette,
            bank,
            prior,
        })
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn attribute_mask(&self, rng: &mut ChaCha8Rng, lesion: &Mask) -> Option<Mask> {
        if let Some(masks) = &self.prior.attributes {
            return Some(masks[rng.gen_range(0..masks.len())].clone());
        }
        let a = &self.config.attribute;
        let cfg = SubRegionConfig {
            noise: a.noise,
            min_fraction: a.min_fraction,
            max_fraction: a.max_fraction,
            morph_radius: 1,
            max_attempts: 4,
        };
        sub_region(rng, lesion, &cfg)
    }

    /// Deterministic sample for `seed`.
    pub fn generate(&self, seed: u64) -> Result<SynSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.config.image_size;
        let lesion = sample_lesion_mask(&mut rng, &self.prior)?;
        let attribute = self.attribute_mask(&mut rng, &lesion);
        let (background, _) = gen_background(&mut rng, &self.palette, size, size, &self.config.background);
        let combo = self.bank.sample_combo(rng.gen::<f64>());
        let (image, color_masks) = apply_lesion_colors(
            &background,
            &lesion,
            attribute.as_ref(),
            &self.bank.combos[combo],
            &self.bank,
            &self.config.subregion,
            &mut rng,
        );
        let (lesion_mask, border_mask) = derive_masks(&color_masks, self.config.border_radius);
        let labels = std::array::from_fn(|c| !color_masks[c].is_empty());
        Ok(SynSample {
            image,
            lesion_mask,
            border_mask,
            color_masks,
            labels,
            seed,
            combo,
        })
    }

    pub fn combo_names(&self, combo: usize) -> Vec<&'static str> {
        self.bank.combos[combo].iter().map(|c| ColorName::as_str(*c)).collect()
    }
}
