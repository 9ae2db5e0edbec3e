use std::ops::Range;

use serde::{Deserialize, Serialize};
use viconex_autodiff::PoolKind;

use crate::error::{Error, Result};

/// Which token streams the encoder runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Visual concept tokens only.
    Baseline,
    /// Visual tokens enriched by adding the text tokens before stage 3.
    TokenFusion,
    /// Text tokens refined by their own cross-attention stage.
    TextGuided,
    /// Token fusion plus the text stage.
    Hybrid,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::TokenFusion,
        Variant::TextGuided,
        Variant::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TokenFusion => "token-fusion",
            Variant::TextGuided => "text-guided",
            Variant::Hybrid => "hybrid",
        }
    }

    pub fn uses_text_bank(self) -> bool {
        self != Variant::Baseline
    }

    /// Runs the text cross-attention stage and produces text logits.
    pub fn has_text_stage(self) -> bool {
        matches!(self, Variant::TextGuided | Variant::Hybrid)
    }

    /// Adds the text tokens to the visual tokens before stage 3.
    pub fn fuses_tokens(self) -> bool {
        matches!(self, Variant::TokenFusion | Variant::Hybrid)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolName {
    Gap,
    Gmp,
    Gwrp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub kind: PoolName,
    /// Rank decay for GWRP; ignored by the other kinds.
    pub decay: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            kind: PoolName::Gmp,
            decay: 0.9,
        }
    }
}

impl PoolingConfig {
    pub fn kind(&self) -> PoolKind {
        match self.kind {
            PoolName::Gap => PoolKind::Gap,
            PoolName::Gmp => PoolKind::Gmp,
            PoolName::Gwrp => PoolKind::Gwrp { decay: self.decay },
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            PoolName::Gap => "GAP",
            PoolName::Gmp => "GMP",
            PoolName::Gwrp => "GWRP",
        }
    }
}

/// How the text tokens relate to the projection weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextTokenMode {
    /// Tokens are projected once when the bank is built and never change.
    Frozen,
    /// The projection is a trained parameter and tokens are re-projected on
    /// every forward pass.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionInit {
    TruncNormal,
    /// Identity on the leading `min(D_k, D)` coordinates.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub concepts: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch_layers: usize,
    pub text_layers: usize,
    pub concept_layers: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub pooling: PoolingConfig,
    pub cam_kernel: usize,
    pub layer_scale_init: f64,
    pub init_std: f64,
    pub text_dim: usize,
    pub text_mode: TextTokenMode,
    pub text_projection_init: ProjectionInit,
    /// Self-attention layers (counted from the last) averaged into the
    /// patch affinity; 0 means `ceil(patch_layers / 2)`.
    pub affinity_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            concepts: 6,
            dim: 128,
            heads: 4,
            depth: 10,
            patch_layers: 6,
            text_layers: 2,
            concept_layers: 2,
            mlp_ratio: 4,
            variant: Variant::Hybrid,
            pooling: PoolingConfig::default(),
            cam_kernel: 3,
            layer_scale_init: 1e-4,
            init_std: 0.02,
            text_dim: 1024,
            text_mode: TextTokenMode::Frozen,
            text_projection_init: ProjectionInit::TruncNormal,
            affinity_layers: 0,
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch_layers + self.text_layers + self.concept_layers != self.depth {
            return fail(format!(
                "layer split {}+{}+{} does not sum to depth {}",
                self.patch_layers, self.text_layers, self.concept_layers, self.depth
            ));
        }
        if self.concept_layers == 0 {
            return fail("at least one concept attention layer is required".into());
        }
        if self.concepts == 0 {
            return fail("concept count must be positive".into());
        }
        if self.cam_kernel % 2 == 0 {
            return fail(format!("cam_kernel must be odd, got {}", self.cam_kernel));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.variant.uses_text_bank() && self.text_dim == 0 {
            return fail("text_dim must be positive".into());
        }
        if self.variant.has_text_stage() && self.text_layers == 0 {
            return fail(format!("variant {} needs at least one text layer", self.variant));
        }
        if self.affinity_layers > self.patch_layers {
            return fail(format!(
                "affinity_layers {} exceeds patch_layers {}",
                self.affinity_layers, self.patch_layers
            ));
        }
        if !(self.layer_scale_init.is_finite() && self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail("layer_scale_init and init_std must be finite".into());
        }
        self.pooling.kind().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            concepts: self.concepts,
            patches: self.patches(),
        }
    }

    /// Number of trailing self-attention layers used for the affinity.
    pub fn affinity_layer_count(&self) -> usize {
        if self.affinity_layers == 0 {
            self.patch_layers.div_ceil(2)
        } else {
            self.affinity_layers
        }
    }
}

/// Index map of the output sequence `[visual | text | patches]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub concepts: usize,
    pub patches: usize,
}

impl TokenLayout {
    pub fn visual(&self) -> Range<usize> {
        0..self.concepts
    }

    pub fn text(&self) -> Range<usize> {
        self.concepts..2 * self.concepts
    }

    pub fn patch(&self) -> Range<usize> {
        2 * self.concepts..self.len()
    }

    pub fn len(&self) -> usize {
        2 * self.concepts + self.patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
