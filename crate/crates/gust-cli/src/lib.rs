//! IO, file formats, and experiment orchestration around the training
//! engine: tab-separated dataset loading, synthetic block-model generation,
//! checkpoint persistence, JSONL metrics, and the subcommand implementations
//! behind the `gust` binary.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod sbm;

pub use dataset::{load_dataset, DatasetBundle};
pub use error::CliError;
pub use sbm::{generate_sbm, SbmParams};
