use super::checkpoint::Checkpoint;
use super::dataset::{DatasetManifest, Sample};
use super::model::Model;
use super::train::class_rows;
use crate::clip_adapter::ClipWeightBundle;
use crate::error::Result;
use crate::pseudo_supervision::{SplitMode, ZSSplit};
use crate::raster::LabelMap;
use crate::semantic_head::ForwardMode;
use crate::zss_objective::{calibrated_inference, compute_metrics, MetricsReport};

/// Calibrated predictions for each image, upsampled to label resolution.
pub fn predict(
    model: &Model,
    bundle: &ClipWeightBundle,
    samples: &[Sample],
    split: &ZSSplit,
    gamma: f64,
) -> Result<Vec<LabelMap>> {
    let all_ids: Vec<usize> = (0..split.num_classes()).collect();
    let a_full = class_rows(bundle, split, &all_ids)?;
    samples
        .iter()
        .map(|s| {
            let trace = model.forward(&[&s.image], bundle, ForwardMode::Eval)?;
            let (_, h, w) = trace.head.grid;
            let pred = calibrated_inference(&trace.head.f_c, (h, w), &a_full, split, gamma)?;
            Ok(pred.upsample(s.image.height / h))
        })
        .collect()
}

/// Metrics of a model over every class of a dataset.
pub fn evaluate_model(
    model: &Model,
    bundle: &ClipWeightBundle,
    samples: &[Sample],
    split: &ZSSplit,
    gamma: f64,
) -> Result<(MetricsReport, Vec<LabelMap>)> {
    let preds = predict(model, bundle, samples, split, gamma)?;
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok((compute_metrics(&preds, &gts, split)?, preds))
}

/// Restores a checkpoint (checking the bundle fingerprint) and evaluates it.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    bundle: &ClipWeightBundle,
    gamma: f64,
) -> Result<MetricsReport> {
    let model = checkpoint.restore(bundle)?;
    let split = manifest.split(SplitMode::Inductive)?;
    let samples = manifest.load_samples()?;
    evaluate_model(&model, bundle, &samples, &split, gamma).map(|(r, _)| r)
}
