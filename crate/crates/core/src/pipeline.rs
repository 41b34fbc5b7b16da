//! WAV bytes to cough segments to tensors.

use crate::audio_io::{read_wav, resample, AudioSignal};
use crate::config::PipelineConfig;
use crate::cough_detect::{detect_coughs, CoughSegments};
use crate::error::Result;
use crate::sonograph::{build_tensor, CoughTensor};

pub fn detect(signal: &AudioSignal, cfg: &PipelineConfig) -> Result<CoughSegments> {
    detect_coughs(signal, &cfg.preprocess, &cfg.sift, &cfg.detector)
}

/// Raw audio of the first detected cough, if any.
pub fn first_cough(signal: &AudioSignal, segments: &CoughSegments) -> Option<AudioSignal> {
    segments
        .raw_ranges()
        .first()
        .map(|&(s, e)| signal.slice(s, e))
        .filter(|seg| !seg.is_empty())
}

/// Resample `segment` to the sonograph rate and build its tensor.
pub fn tensor_of(segment: &AudioSignal, cfg: &PipelineConfig) -> Result<CoughTensor> {
    let at_rate = resample(segment, cfg.sonograph.sample_rate)?;
    build_tensor(&at_rate, &cfg.sonograph, cfg.tensor_mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub segments: CoughSegments,
    /// Tensor of the first cough; `None` when no cough was found.
    pub tensor: Option<CoughTensor>,
}

/// Detect coughs and featurise the first one.
pub fn featurize(signal: &AudioSignal, cfg: &PipelineConfig) -> Result<Featurized> {
    let segments = detect(signal, cfg)?;
    let tensor = match first_cough(signal, &segments) {
        Some(seg) => Some(tensor_of(&seg, cfg)?),
        None => None,
    };
    Ok(Featurized { segments, tensor })
}

/// Like [`featurize`], but falls back to the whole recording when no cough
/// is detected. Used for labelled corpora, where every file is a cough.
pub fn featurize_or_whole(signal: &AudioSignal, cfg: &PipelineConfig) -> Result<(CoughTensor, bool)> {
    let f = featurize(signal, cfg)?;
    match f.tensor {
        Some(t) => Ok((t, true)),
        None => Ok((tensor_of(signal, cfg)?, false)),
    }
}

/// Decode WAV bytes and run [`featurize`].
pub fn featurize_wav(bytes: &[u8], cfg: &PipelineConfig) -> Result<Featurized> {
    featurize(&read_wav(bytes)?, cfg)
}
