use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use crate::backbone::{BackboneConfig, BackboneParams};
use crate::clip_adapter::ClipWeightBundle;
use crate::error::{Error, Result};
use crate::nn::NamedArray;
use crate::semantic_head::{frozen_fingerprint, CSHConfig, CSHParams};

pub const CHECKPOINT_FORMAT: &str = "chimera-checkpoint/1";

/// Trainable state at one iteration. Stored as JSON; floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub iteration: u64,
    /// Fingerprint of the frozen bundle the parameters were trained against.
    pub fingerprint: String,
    pub config: TrainConfig,
    pub backbone_config: BackboneConfig,
    pub backbone: Vec<NamedArray>,
    pub csh_config: CSHConfig,
    pub csh_in_channels: usize,
    pub csh_d_vis: usize,
    pub csh: Vec<NamedArray>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub bn_batches_tracked: u64,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        iteration: u64,
        rng: &ChaCha8Rng,
        fingerprint: &str,
        config: &TrainConfig,
    ) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.to_string(),
            iteration,
            fingerprint: fingerprint.to_string(),
            config: config.clone(),
            backbone_config: model.backbone.config.clone(),
            backbone: model.backbone.params.to_arrays()?,
            csh_config: model.csh.config.clone(),
            csh_in_channels: model.csh.in_channels,
            csh_d_vis: model.csh.d_vis,
            csh: model.csh.params.to_arrays()?,
            bn_running_mean: model.csh.bn_running_mean.clone(),
            bn_running_var: model.csh.bn_running_var.clone(),
            bn_batches_tracked: model.csh.bn_batches_tracked,
            rng: rng.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format `{}`",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model, refusing bundles other than the one trained against.
    pub fn restore(&self, bundle: &ClipWeightBundle) -> Result<Model> {
        let found = frozen_fingerprint(bundle);
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        let backbone = BackboneParams::init(self.backbone_config.clone())?;
        backbone.params.load_arrays(&self.backbone)?;
        let mut csh = CSHParams::init(self.csh_config.clone(), self.csh_in_channels, self.csh_d_vis)?;
        csh.params.load_arrays(&self.csh)?;
        if self.bn_running_mean.len() != self.csh_d_vis || self.bn_running_var.len() != self.csh_d_vis {
            return Err(Error::Dimension("batch-norm statistics have the wrong width".into()));
        }
        csh.bn_running_mean = self.bn_running_mean.clone();
        csh.bn_running_var = self.bn_running_var.clone();
        csh.bn_batches_tracked = self.bn_batches_tracked;
        Ok(Model { backbone, csh })
    }
}
