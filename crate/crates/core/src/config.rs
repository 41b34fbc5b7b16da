//! Aggregate configuration for the detection and feature pipeline.

use serde::{Deserialize, Serialize};

use crate::cough_detect::DetectorConfig;
use crate::emd::SiftConfig;
use crate::error::Result;
use crate::preprocess::PreprocessConfig;
use crate::sonograph::{SonographConfig, TensorMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub sift: SiftConfig,
    pub detector: DetectorConfig,
    pub sonograph: SonographConfig,
    pub tensor_mode: TensorMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            sift: SiftConfig::default(),
            detector: DetectorConfig::default(),
            sonograph: SonographConfig::default(),
            tensor_mode: TensorMode::ThreeD,
        }
    }
}

impl PipelineConfig {
    /// Checks everything that does not depend on the input's sample rate.
    pub fn validate(&self) -> Result<()> {
        self.sift.validate()?;
        self.detector.validate()?;
        self.sonograph.validate()
    }
}
