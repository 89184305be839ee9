//! Command-line harness for ConPreDiff models: configuration, datasets,
//! palette tokenization, training, sampling, inpainting, evaluation,
//! checkpoints and ablation runners.

pub mod ablation;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fid;
pub mod image_io;
pub mod palette;
pub mod report;
pub mod train;

pub use checkpoint::CheckpointRecord;
pub use config::RunConfig;
pub use dataset::{load_dataset, Dataset, DatasetSpec};
pub use error::{HarnessError, Result};
pub use fid::{fid_proxy, FidResult};
pub use palette::Palette;
