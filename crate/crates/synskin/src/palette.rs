use crate::error::{Result, SynSkinError};
use serde::{Deserialize, Serialize};

pub const TONE_COUNT: usize = 29;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaletteConfig {
    pub lightest: [u8; 3],
    pub darkest: [u8; 3],
}

impl Default for PaletteConfig {
    fn default() -> Self {
        Self {
            lightest: [250, 224, 200],
            darkest: [92, 60, 42],
        }
    }
}

/// 29 skin tones ordered light to dark.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinTonePalette {
    tones: Vec<[u8; 3]>,
}

pub fn luminance(rgb: [u8; 3]) -> f64 {
    0.2126 * rgb[0] as f64 + 0.7152 * rgb[1] as f64 + 0.0722 * rgb[2] as f64
}

impl SkinTonePalette {
    /// Linear RGB ramp between the configured endpoints.
    pub fn from_config(cfg: &PaletteConfig) -> Result<Self> {
        let tones: Vec<[u8; 3]> = (0..TONE_COUNT)
            .map(|i| {
                let t = i as f64 / (TONE_COUNT - 1) as f64;
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let v = cfg.lightest[c] as f64 * (1.0 - t) + cfg.darkest[c] as f64 * t;
                    rgb[c] = v.round() as u8;
                }
                rgb
            })
            .collect();
        Self::from_tones(tones)
    }

    pub fn from_tones(tones: Vec<[u8; 3]>) -> Result<Self> {
        if tones.len() != TONE_COUNT {
            return Err(SynSkinError::Config(format!(
                "palette needs {TONE_COUNT} tones, got {}",
                tones.len()
            )));
        }
        if tones.windows(2).any(|w| luminance(w[0]) <= luminance(w[1])) {
            return Err(SynSkinError::Config(
                "palette tones must strictly decrease in luminance".into(),
            ));
        }
        Ok(Self { tones })
    }

    pub fn tones(&self) -> &[[u8; 3]] {
        &self.tones
    }

    pub fn tone(&self, i: usize) -> [u8; 3] {
        self.tones[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_has_29_ordered_tones() {
        let p = SkinTonePalette::from_config(&PaletteConfig::default()).unwrap();
        assert_eq!(p.tones().len(), 29);
        assert!(p.tones().windows(2).all(|w| luminance(w[0]) > luminance(w[1])));
    }

    #[test]
    fn flat_palette_rejected() {
        let cfg = PaletteConfig {
            lightest: [100, 100, 100],
            darkest: [100, 100, 100],
        };
        assert!(SkinTonePalette::from_config(&cfg).is_err());
    }
}
