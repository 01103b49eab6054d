//! Similarity heatmaps between dense features and a reference embedding.

use std::path::Path;

use super::model::Model;
use crate::clip_adapter::{embed_class_names, encode_image, ClipWeightBundle};
use crate::error::{Error, Result};
use crate::nn::to_vec;
use crate::raster::Image;
use crate::selective_distillation::similarity_scores;
use crate::semantic_head::ForwardMode;

/// The 256-entry viridis lookup table.
pub fn viridis_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, entry) in lut.iter_mut().enumerate() {
        let c = colorous::VIRIDIS.eval_rational(i, 256);
        *entry = [c.r, c.g, c.b];
    }
    lut
}

/// Quantizes values in `[0, 1]` to 256 levels.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders a `height × width` field of values in `[0, 1]` with viridis.
pub fn save_viridis_png(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} values for a {height}×{width} image",
            values.len()
        )));
    }
    let lut = viridis_lut();
    let buf: Vec<u8> = values.iter().flat_map(|&v| lut[quantize(v) as usize]).collect();
    image::RgbImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer length checked above")
        .save(path)?;
    Ok(())
}

/// Min-max normalization; a constant field maps to 0.5 everywhere.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// What the dense features are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapReference {
    /// The image's own CLS token.
    ImageCls,
    /// The text embedding of the requested class.
    ClassText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Raw similarity scores, row-major.
    pub scores: Vec<f64>,
    /// Scores min-max normalized to `[0, 1]`.
    pub normalized: Vec<f64>,
}

impl Heatmap {
    pub fn from_scores(scores: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} scores for a {height}×{width} grid",
                scores.len()
            )));
        }
        Ok(Self {
            height,
            width,
            normalized: min_max_normalize(&scores),
            scores,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_viridis_png(&self.normalized, self.height, self.width, path)
    }

    /// `row,col,score,normalized` per position.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "col", "score", "normalized"])?;
        for (i, (s, n)) in self.scores.iter().zip(&self.normalized).enumerate() {
            w.write_record([
                (i / self.width).to_string(),
                (i % self.width).to_string(),
                format!("{s:.10e}"),
                format!("{n:.8}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Similarity of every dense feature of `image` to the chosen reference.
/// `class_name` must be known to the bundle in either mode.
pub fn export_heatmap(
    model: &Model,
    bundle: &ClipWeightBundle,
    image: &Image,
    class_name: &str,
    reference: HeatmapReference,
) -> Result<Heatmap> {
    let text = embed_class_names(&[class_name], bundle)?;
    let target = match reference {
        HeatmapReference::ClassText => text.get(0)?,
        HeatmapReference::ImageCls => encode_image(image, bundle)?.cls_token,
    };
    let trace = model.forward(&[image], bundle, ForwardMode::Eval)?;
    let (_, h, w) = trace.head.grid;
    let scores = to_vec(&similarity_scores(&trace.head.f_c, &target)?)?;
    Heatmap::from_scores(scores, h, w)
}
