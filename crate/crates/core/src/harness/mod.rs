//! Data, configuration, training, checkpoints, metrics and grids.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod grid;
pub mod metrics;
pub mod optim;
pub mod reconstruct;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Architecture, ExperimentSpec, OptimizerConfig, RunConfig};
pub use data::Dataset;
pub use grid::{run_grid, GridConfig};
pub use metrics::{MetricsRow, Split};
pub use optim::Adam;
pub use reconstruct::{reconstruct_dir, ReconstructOptions};
pub use train::{load_data, run_experiment, RunSummary, Trainer};
