//! Multi-modality breast ultrasound classification: a dual-token ViT
//! encoder, image-guided attention over video frames, late fusion and the
//! training and evaluation harness around them.

pub mod aggregation;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
