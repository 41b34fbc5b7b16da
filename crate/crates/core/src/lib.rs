//! Cough-sound analysis pipeline.
//!
//! The crate is organised along the processing chain:
//!
//! * [`audio_io`] decodes WAV audio and resamples it.
//! * [`preprocess`] low-pass filters, trims and decimates a recording.
//! * [`emd`] implements empirical mode decomposition and the Hilbert envelope.
//! * [`cough_detect`] turns mode envelopes into cough-burst index ranges.
//! * [`sonograph`] builds the MFCC / Mel-spectrogram / LSP tensor of a burst.
//! * [`model`] is the DeepCough convolutional classifier with ADAM training.
//! * [`eval`] holds stratified k-fold evaluation, metrics and severity labels.
//!
//! [`pipeline`] wires the stages together and [`synth`] generates synthetic
//! corpora for testing.

pub mod audio_io;
pub mod config;
pub mod cough_detect;
pub mod emd;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod sonograph;
pub mod synth;

pub use audio_io::AudioSignal;
pub use config::PipelineConfig;
pub use error::{Error, Result};
