//! Scale-aware self-supervised pretraining for segmentation of small and
//! large structures.

pub mod config;
pub mod evalkit;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod train;
pub mod types;
pub mod views;

pub use config::{validate_config, ConfigError, ExperimentConfig, Sampling, SslMethod, ValidatedConfig};
pub use rng::{RngState, RngStream};
pub use types::{CropDivisor, ImageRecord, ScaleSpec, ShapeError, Split, Window};
