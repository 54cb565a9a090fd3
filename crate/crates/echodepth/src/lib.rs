//! Depth estimation from synthetic ultrasonic echoes.
//!
//! The pipeline simulates shoebox rooms with the image-source method,
//! band-limits a chirp to ultrasonic or audible ranges, extracts log
//! spectrogram features, and trains an encoder-decoder network to predict
//! the room's depth map from binaural echoes — optionally augmented by
//! mixing ultrasonic features with lower-band ones during training.

// Validation predicates are written `!(x > 0.0)` so that NaN fails them;
// the `partial_cmp` form clippy suggests would obscure that intent.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod augment;
pub mod dsp;
pub mod error;
pub mod experiments;
pub mod network;
pub mod persistence;
pub mod training;

pub use error::{Error, Result};
