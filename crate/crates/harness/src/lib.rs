//! Training loop, checkpoints, evaluation reports, explanation export and
//! the experiment grids behind the `viconex` command.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod evaluate;
pub mod export;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{Dataset, TrainSet};
pub use error::{HarnessError, Result};
pub use optim::AdamW;
pub use train::{train, Trainer};
