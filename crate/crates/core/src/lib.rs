//! Zero-shot semantic segmentation with a trainable backbone feeding a partially
//! frozen vision-language head.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`clip_adapter`]: frozen weight bundle, miniature visual encoder, text embeddings
//! - [`backbone`]: trainable dense feature extractor
//! - [`semantic_head`]: projection of dense features into the joint embedding space
//! - [`selective_distillation`]: top-K selection against the CLS token and the InfoNCE loss
//! - [`pseudo_supervision`]: pseudo masks, class prototypes and the alignment KL loss
//! - [`zss_objective`]: pixel logits, segmentation losses, calibrated inference, metrics
//! - [`pipeline`]: datasets, configuration, training, evaluation and analysis tools

pub mod backbone;
pub mod clip_adapter;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod pseudo_supervision;
pub mod raster;
pub mod selective_distillation;
pub mod semantic_head;
pub mod zss_objective;

pub use backbone::{extract_features, BackboneConfig, BackboneParams, DenseFeatureMap};
pub use clip_adapter::{
    embed_class_names, encode_image, load_weight_bundle, make_mini_clip, save_weight_bundle,
    ClipImageOutputs, ClipWeightBundle, MiniClipSpec, VEncoderWeights,
};
pub use error::{Error, Result};

pub use pseudo_supervision::{PrototypeSet, PseudoMask, PseudoMaskConfig, SplitMode, ZSSplit};
pub use zss_objective::{MetricsReport, PixelLogits};
pub use raster::{Image, LabelMap, IGNORE_LABEL};
pub use selective_distillation::{DecayMode, DecaySchedule, SelectionResult};
pub use semantic_head::{CSHParams, CSHTrace, ForwardMode, NormKind};

