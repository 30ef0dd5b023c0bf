//! Contrastive mixup (CosMix) training for low-resource keyword spotting.
//!
//! The crate covers the whole pipeline: WAV ingestion and speaker-partitioned
//! trimming ([`dataset`]), log-Mel filterbank features ([`features`]),
//! waveform and spectrogram augmentation ([`augment`]), a small tape-based
//! reverse-mode differentiation engine ([`autodiff`]), the convolutional
//! keyword model ([`model`]) and the training loop ([`trainer`]).

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
