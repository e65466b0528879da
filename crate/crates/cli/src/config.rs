//! The pipeline configuration document.
//!
//! One JSON file describes a run; command-line flags override its fields.
//! Every stage seed is derived from the root `seed`, so the `seed` fields of
//! the nested sections are overwritten when the document is resolved.

use std::path::{Path, PathBuf};

use melrvq_core::dsp::DspConfig;
use melrvq_core::rvq::RvqDims;
use melrvq_core::seed::derive_seed;
use melrvq_core::ssl::{MaskConfig, ModelConfig, PretrainConfig};
use melrvq_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqType {
    Trained,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqShape {
    pub stages: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
}

impl Default for RvqShape {
    fn default() -> Self {
        let d = RvqDims::default();
        Self {
            stages: d.stages,
            codebook_size: d.codebook_size,
            code_dim: d.code_dim,
        }
    }
}

impl RvqShape {
    pub fn dims(&self, input_dim: usize) -> RvqDims {
        RvqDims {
            stages: self.stages,
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            input_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateSection {
    /// Teacher layer; `null` means one below the top block.
    pub layer: Option<usize>,
    pub rvq: RvqShape,
    pub train: TrainConfig,
}

impl Default for IterateSection {
    fn default() -> Self {
        Self {
            layer: None,
            rvq: RvqShape::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub audio_dir: Option<PathBuf>,
    pub mels_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub rvq: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dsp: DspConfig,
    pub rvq: RvqShape,
    pub vq_type: VqType,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub iterate: IterateSection,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dsp: DspConfig::default(),
            rvq: RvqShape::default(),
            vq_type: VqType::Trained,
            train: TrainConfig::default(),
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            iterate: IterateSection::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    /// Seed of the frozen-random quantizer.
    pub fn frozen_seed(&self) -> u64 {
        derive_seed(self.seed, "cli/frozen-rvq")
    }

    /// Fill every stage seed from the root seed and validate the sections.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.train.seed = derive_seed(self.seed, "cli/train-rvq");
        self.mask.seed = derive_seed(self.seed, "cli/mask");
        self.pretrain.seed = derive_seed(self.seed, "cli/pretrain");
        self.iterate.train.seed = derive_seed(self.seed, "cli/iterate-rvq");
        let usage = |e: melrvq_core::Error| CliError::Usage(e.to_string());
        self.dsp.validate().map_err(usage)?;
        self.rvq.dims(self.dsp.mel_bins).validate().map_err(usage)?;
        self.iterate.rvq.dims(self.model.d_model).validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.iterate.train.validate().map_err(usage)?;
        self.mask.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        Ok(self)
    }
}

pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| CliError::Usage(format!("missing {what} (flag or paths.{what} in the config)")))
}
