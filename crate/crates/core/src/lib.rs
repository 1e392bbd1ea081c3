//! Semantic part learning and semantic-guided masking for masked
//! autoencoder pretraining, at desk scale.

pub mod error;
pub mod mae_core;
pub mod mask_scheduler;
pub mod numerics;
pub mod params;
pub mod partlearn;
pub mod recon_decoder;

pub use error::{Error, Result};
