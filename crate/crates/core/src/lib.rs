//! Controlled-attribute experimentation for speech enhancement.
//!
//! The crate covers the whole generation, training and evaluation loop:
//!
//! * [`corpus`] ingests speech and noise trees into manifests.
//! * [`sampler`] builds generation plans that vary one dataset attribute
//!   (text, language, speaker) and noise subsets (duration, type count).
//! * [`synth`] executes plans through a zero-shot TTS adapter or the
//!   deterministic mock voice.
//! * [`mixer`] simulates noisy/clean pairs, either materialized up front or
//!   streamed per epoch.
//! * [`models`] holds the spectral front end, a band-split recurrent mask
//!   estimator and a score-based diffusion enhancer.
//! * [`trainer`] trains either model kind with Adam.
//! * [`evalsuite`] scores enhancers with SDR, SI-SDR, STOI and external
//!   metric plugins.
//! * [`runner`] glues the stages into cached attribute sweeps.

pub mod audio;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod fixtures;
pub mod mixer;
pub mod models;
pub mod runner;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Framework-wide sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
