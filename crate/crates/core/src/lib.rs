//! Referring video object segmentation at desk scale.
//!
//! A clip of `T` frames and a referring expression pass through toy
//! convolutional / transformer encoders, two-stream cross-modal fusion,
//! per-frame query decoding and a video-level object cluster; heads predict
//! per-query class logits, boxes and dynamic-kernel masks. Training matches
//! the best query trajectory to the referred object and minimizes a weighted
//! sum of mask, box, class and contrastive losses. The crate also provides
//! the evaluation metrics and a synthetic moving-shapes dataset.

pub mod config;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sim;
pub mod synth;
pub mod train;
pub mod verify;

pub use config::Config;
pub use error::{ConfigError, Result, SocError};
pub use model::Model;
pub use params::ParamStore;
