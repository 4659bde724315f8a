//! Region-grounded chest X-ray report generation with multimodal survival
//! prediction.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod language;
pub mod nn;
pub mod pipeline;
pub mod survival;
pub mod visual;

pub use config::ModelConfig;
pub use error::{Error, Result};
