//! Training configuration. The file format is TOML, normally written as flat
//! dotted keys (`sgd.k0 = 9000`); every key is optional and unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::pseudo_supervision::{PseudoMaskConfig, SplitMode};
use crate::selective_distillation::{DecayMode, DecaySchedule};
use crate::semantic_head::{CSHConfig, NormKind};
use crate::zss_objective::FocalParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset directory holding `manifest.json`.
    pub dataset: PathBuf,
    /// Frozen weight-bundle directory.
    pub bundle: PathBuf,
    /// Where checkpoints and the loss log are written.
    pub output_dir: PathBuf,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: SplitMode,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub optim: OptimSection,
    pub backbone: BackboneSection,
    pub csh: CshSection,
    pub sgd: SgdSection,
    pub sam: SamSection,
    pub pseudo: PseudoSection,
    pub loss: LossSection,
    pub infer: InferSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            bundle: PathBuf::from("mini-clip"),
            output_dir: PathBuf::from("run"),
            iterations: 1000,
            batch_size: 16,
            seed: 0,
            mode: SplitMode::Inductive,
            checkpoint_every: 0,
            optim: OptimSection::default(),
            backbone: BackboneSection::default(),
            csh: CshSection::default(),
            sgd: SgdSection::default(),
            sam: SamSection::default(),
            pseudo: PseudoSection::default(),
            loss: LossSection::default(),
            infer: InferSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run spent in linear learning-rate warmup.
    pub warmup_fraction: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub stride: usize,
    pub channels: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            stride: b.stride,
            channels: b.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CshSection {
    pub norm: NormKind,
    pub vencoder_blocks: usize,
    pub bn_momentum: f64,
    pub gn_groups: usize,
}

impl Default for CshSection {
    fn default() -> Self {
        let c = CSHConfig::default();
        Self {
            norm: c.norm,
            vencoder_blocks: c.vencoder_blocks,
            bn_momentum: c.bn_momentum,
            gn_groups: c.gn_groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub k0: usize,
    pub rate: f64,
    pub k_min: usize,
    pub mode: DecayMode,
    pub tau: f64,
    /// Gumbel perturbation of the ranking; off gives deterministic top-K.
    pub noise: bool,
}

impl Default for SgdSection {
    fn default() -> Self {
        let d = DecaySchedule::default();
        Self {
            k0: d.k0,
            rate: d.rate,
            k_min: d.k_min,
            mode: d.mode,
            tau: 0.07,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamSection {
    pub tau_f: f64,
    pub tau_c: f64,
    /// Same setting as `loss.lambda_sam`; give at most one, or equal values.
    pub lambda: Option<f64>,
}

impl Default for SamSection {
    fn default() -> Self {
        Self {
            tau_f: 0.07,
            tau_c: 0.01,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub k_clusters: usize,
    pub iterations: usize,
    pub theta: f64,
    pub min_area: usize,
}

impl Default for PseudoSection {
    fn default() -> Self {
        let p = PseudoMaskConfig::default();
        Self {
            k_clusters: p.k_clusters,
            iterations: p.iterations,
            theta: p.theta,
            min_area: p.min_area,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_sam: Option<f64>,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let f = FocalParams::default();
        Self {
            lambda_sam: None,
            focal_gamma: f.gamma,
            focal_alpha: f.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub gamma: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { gamma: 0.5 }
    }
}

pub const DEFAULT_LAMBDA_SAM: f64 = 0.5;

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.dataset, &mut cfg.bundle, &mut cfg.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lambda_sam(&self) -> f64 {
        self.loss
            .lambda_sam
            .or(self.sam.lambda)
            .unwrap_or(DEFAULT_LAMBDA_SAM)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let (Some(a), Some(b)) = (self.loss.lambda_sam, self.sam.lambda) {
            if a != b {
                return bad(format!("loss.lambda_sam = {a} conflicts with sam.lambda = {b}"));
            }
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, t) in [
            ("sgd.tau", self.sgd.tau),
            ("sam.tau_f", self.sam.tau_f),
            ("sam.tau_c", self.sam.tau_c),
        ] {
            if !(t > 0.0) {
                return bad(format!("{name} must be positive, got {t}"));
            }
        }
        if !(self.optim.lr > 0.0) || !(0.0..=1.0).contains(&self.optim.warmup_fraction) {
            return bad("optim.lr must be positive and optim.warmup_fraction in [0, 1]".into());
        }
        if !(self.lambda_sam() >= 0.0) {
            return bad("lambda_sam must be non-negative".into());
        }
        if self.pseudo.k_clusters < 1 {
            return bad("pseudo.k_clusters must be at least 1".into());
        }
        self.decay_schedule()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn decay_schedule(&self) -> DecaySchedule {
        DecaySchedule {
            k0: self.sgd.k0,
            rate: self.sgd.rate,
            k_min: self.sgd.k_min,
            mode: self.sgd.mode,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            stride: self.backbone.stride,
            channels: self.backbone.channels,
            seed: self.seed,
        }
    }

    pub fn csh_config(&self) -> CSHConfig {
        CSHConfig {
            norm: self.csh.norm,
            vencoder_blocks: self.csh.vencoder_blocks,
            bn_momentum: self.csh.bn_momentum,
            gn_groups: self.csh.gn_groups,
            seed: self.seed.wrapping_add(1),
            ..CSHConfig::default()
        }
    }

    pub fn pseudo_config(&self) -> PseudoMaskConfig {
        PseudoMaskConfig {
            k_clusters: self.pseudo.k_clusters,
            iterations: self.pseudo.iterations,
            theta: self.pseudo.theta,
            min_area: self.pseudo.min_area,
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            gamma: self.loss.focal_gamma,
            alpha: self.loss.focal_alpha,
        }
    }
}
