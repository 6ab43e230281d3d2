//! Modality-shared contrastive language-image encoders: model, training,
//! evaluation and cross-modal analysis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod results;
pub mod tokenizer;
pub mod train;

pub use error::{MsClipError, Result};
