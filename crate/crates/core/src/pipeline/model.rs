use candle_core::{Tensor, Var};

use super::config::TrainConfig;
use crate::backbone::{extract_features_traced, BackboneParams, DenseFeatureMap};
use crate::clip_adapter::ClipWeightBundle;
use crate::error::Result;
use crate::raster::Image;
use crate::semantic_head::{csh_forward, CSHParams, CSHTrace, ForwardMode};

/// Everything that is trained: the backbone and the semantic head.
#[derive(Debug)]
pub struct Model {
    pub backbone: BackboneParams,
    pub csh: CSHParams,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub stages: Vec<Tensor>,
    pub features: DenseFeatureMap,
    pub head: CSHTrace,
}

impl Model {
    pub fn init(cfg: &TrainConfig, bundle: &ClipWeightBundle) -> Result<Self> {
        let backbone = BackboneParams::init(cfg.backbone_config())?;
        let csh = CSHParams::init(cfg.csh_config(), cfg.backbone.channels, bundle.d_vis)?;
        Ok(Self { backbone, csh })
    }

    /// Trainable variables, backbone first.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = self.backbone.params.vars();
        vars.extend(self.csh.params.vars());
        vars
    }

    pub fn forward(&self, images: &[&Image], bundle: &ClipWeightBundle, mode: ForwardMode) -> Result<ModelTrace> {
        let batch = Image::batch_tensor(images)?;
        let (features, stages) = extract_features_traced(&batch, &self.backbone)?;
        let head = csh_forward(&features, &self.csh, bundle, mode)?;
        Ok(ModelTrace {
            stages,
            features,
            head,
        })
    }
}
