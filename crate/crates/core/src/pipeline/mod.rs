//! End-to-end driver: datasets, configuration, training, evaluation and analysis.

pub mod checkpoint;
pub mod cka;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod heatmap;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use cka::{analyze_cka, cka, CkaReport};
pub use config::TrainConfig;
pub use dataset::{make_toy_dataset, DatasetManifest, Sample};
pub use evaluate::{evaluate, evaluate_model, predict};
pub use heatmap::{export_heatmap, Heatmap, HeatmapReference};
pub use model::Model;
pub use train::{train, LossRecord, TrainOutcome, Trainer};
