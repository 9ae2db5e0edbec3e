use crate::error::{Result, SynSkinError};
use serde::{Deserialize, Serialize};

/// The six lesion colors, in label-column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    LightBrown,
    DarkBrown,
    Black,
    BlueGray,
    Red,
    White,
}

pub const COLOR_COUNT: usize = 6;

impl ColorName {
    pub const ALL: [ColorName; COLOR_COUNT] = [
        ColorName::LightBrown,
        ColorName::DarkBrown,
        ColorName::Black,
        ColorName::BlueGray,
        ColorName::Red,
        ColorName::White,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColorName::LightBrown => "light_brown",
            ColorName::DarkBrown => "dark_brown",
            ColorName::Black => "black",
            ColorName::BlueGray => "blue_gray",
            ColorName::Red => "red",
            ColorName::White => "white",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| SynSkinError::UnknownColor(s.to_string()))
    }

    pub fn default_anchor(self) -> [u8; 3] {
        match self {
            ColorName::LightBrown => [192, 144, 96],
            ColorName::DarkBrown => [101, 67, 33],
            ColorName::Black => [25, 20, 18],
            ColorName::BlueGray => [102, 123, 142],
            ColorName::Red => [180, 50, 50],
            ColorName::White => [235, 230, 225],
        }
    }
}

/// An ordered color combination; the first entry is the lesion base color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    pub colors: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorBankConfig {
    /// RGB anchor per color, keyed by color name; missing names use defaults.
    pub anchors: Vec<(String, [u8; 3])>,
    /// Per-region, per-channel uniform offset bound.
    pub jitter: u8,
    /// Per-pixel, per-channel uniform offset bound on top of the region color.
    pub pixel_jitter: u8,
    pub combos: Vec<Combo>,
}

// Fitted so the implied per-color marginals come out near light-brown 0.50,
// dark-brown 0.60, black 0.38, blue-gray 0.54, red 0.21, white 0.33.
const DEFAULT_COMBOS: &[(&[&str], f64)] = &[
    (&["light_brown"], 0.061),
    (&["dark_brown"], 0.037),
    (&["light_brown", "dark_brown"], 0.032),
    (&["dark_brown", "light_brown"], 0.032),
    (&["dark_brown", "blue_gray"], 0.019),
    (&["light_brown", "dark_brown", "blue_gray"], 0.014),
    (&["dark_brown", "blue_gray", "black"], 0.051),
    (&["light_brown", "dark_brown", "black"], 0.063),
    (&["dark_brown", "blue_gray", "white"], 0.013),
    (&["light_brown", "blue_gray", "red"], 0.054),
    (&["dark_brown", "black", "blue_gray", "white"], 0.044),
    (&["light_brown", "dark_brown", "blue_gray", "red", "white"], 0.018),
    (&["dark_brown", "red", "white"], 0.041),
    (&["blue_gray", "black", "white"], 0.074),
    (&["light_brown", "dark_brown", "black", "blue_gray"], 0.045),
    (&["light_brown", "red"], 0.072),
    (&["dark_brown", "white"], 0.031),
    (&["blue_gray", "white"], 0.043),
    (&["light_brown", "dark_brown", "white"], 0.025),
    (&["dark_brown", "black"], 0.069),
    (&["blue_gray"], 0.049),
    (&["light_brown", "blue_gray"], 0.044),
    (&["dark_brown", "blue_gray", "red"], 0.030),
    (&["light_brown", "dark_brown", "blue_gray", "black", "white"], 0.039),
];

impl Default for ColorBankConfig {
    fn default() -> Self {
        Self {
            anchors: Vec::new(),
            jitter: 12,
            pixel_jitter: 3,
            combos: DEFAULT_COMBOS
                .iter()
                .map(|(c, w)| Combo {
                    colors: c.iter().map(|s| s.to_string()).collect(),
                    weight: *w,
                })
                .collect(),
        }
    }
}

/// Validated color bank: anchors plus combinations with cumulative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorBank {
    pub anchors: [[u8; 3]; COLOR_COUNT],
    pub jitter: u8,
    pub pixel_jitter: u8,
    pub combos: Vec<Vec<ColorName>>,
    pub weights: Vec<f64>,
}

impl ColorBank {
    pub fn from_config(cfg: &ColorBankConfig) -> Result<Self> {
        let mut anchors = ColorName::ALL.map(ColorName::default_anchor);
        for (name, rgb) in &cfg.anchors {
            anchors[ColorName::parse(name)?.index()] = *rgb;
        }
        if cfg.combos.is_empty() {
            return Err(SynSkinError::Config("color bank has no combinations".into()));
        }
        let mut combos = Vec::with_capacity(cfg.combos.len());
        let mut weights = Vec::with_capacity(cfg.combos.len());
        for combo in &cfg.combos {
            if combo.colors.is_empty() {
                return Err(SynSkinError::Config("empty color combination".into()));
            }
            let colors = combo
                .colors
                .iter()
                .map(|c| ColorName::parse(c))
                .collect::<Result<Vec<_>>>()?;
            let mut seen = [false; COLOR_COUNT];
            for c in &colors {
                if std::mem::replace(&mut seen[c.index()], true) {
                    return Err(SynSkinError::Config(format!(
                        "color {} repeated in a combination",
                        c.as_str()
                    )));
                }
            }
            if !(combo.weight.is_finite() && combo.weight >= 0.0) {
                return Err(SynSkinError::Config(format!("bad combination weight {}", combo.weight)));
            }
            combos.push(colors);
            weights.push(combo.weight);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(SynSkinError::Config(format!(
                "combination weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            anchors,
            jitter: cfg.jitter,
            pixel_jitter: cfg.pixel_jitter,
            combos,
            weights,
        })
    }

    /// Probability that each color appears, implied by the combination weights.
    pub fn implied_marginals(&self) -> [f64; COLOR_COUNT] {
        let mut m = [0.0; COLOR_COUNT];
        for (combo, &w) in self.combos.iter().zip(&self.weights) {
            for c in combo {
                m[c.index()] += w;
            }
        }
        m
    }

    /// Inverse-CDF draw of a combination index.
    pub fn sample_combo(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}
