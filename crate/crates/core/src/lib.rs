//! Multi-concept token transformer for weakly supervised concept
//! localization, with its training objectives, explanation maps and
//! evaluation metrics.

pub mod config;
mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod text_bank;

pub use config::{ModelConfig, PoolName, PoolingConfig, TextTokenMode, TokenLayout, Variant};
pub use error::{Error, Result};
pub use explain::{AffinityMatrix, ExplainOptions, LocalizationMap};
pub use metrics::{MetricEntry, MetricReport};
pub use model::{forward, init_params, predict, AttentionTrace, ConceptScores, Forward, ForwardOptions, MctModel, Mode};
pub use objectives::{total_loss, LossMode, LossReport, LossWeights};
pub use params::ParamStore;
pub use text_bank::TextConceptBank;
pub use viconex_autodiff as autodiff;
