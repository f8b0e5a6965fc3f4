//! Hierarchical deep residual reasoning for temporal moment localization.

pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod numeric;
pub mod params;
pub mod text_encoder;
pub mod video_encoder;
pub mod fusion;
pub mod localizer;
pub mod model;
pub mod eval;
pub mod training;
