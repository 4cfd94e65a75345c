pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use config::{env_threads, DataSpec, RunConfig};
