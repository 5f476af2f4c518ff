pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod seed;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ExperimentConfig, Stage};
pub use pipeline::{run_pipeline, verify_manifest, Manifest, PipelineReport};
pub use seed::{seed_everything, SeedTree};
