//! Linear centered kernel alignment between layer activations.

use std::path::Path;

use candle_core::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Sample;
use super::heatmap::save_viridis_png;
use super::model::Model;
use crate::clip_adapter::{encode_image_traced, ClipWeightBundle};
use crate::error::{Error, Result};
use crate::nn::to_vec;
use crate::semantic_head::ForwardMode;

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Linear CKA of two `(n, ·)` activation matrices; 0 when either is constant.
pub fn cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "CKA needs equal row counts, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("CKA needs at least two samples".into()));
    }
    let (x, y) = (centered(x), centered(y));
    let xx = (x.transpose() * &x).norm();
    let yy = (y.transpose() * &y).norm();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    let yx = (y.transpose() * &x).norm_squared();
    Ok(yx / (xx * yy))
}

/// Activations of one probed layer laid out on a `(height, width)` grid, one row per position.
struct GridActivation {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl GridActivation {
    fn from_rows(rows: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (n, channels) = rows.dims2()?;
        if n != height * width {
            return Err(Error::Dimension(format!("{n} rows for a {height}×{width} grid")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values: to_vec(rows)?,
        })
    }

    /// Activation at the cell covering relative position `(r, c)` of an `h × w` image.
    fn at(&self, r: usize, c: usize, h: usize, w: usize) -> &[f64] {
        let gr = r * self.height / h;
        let gc = c * self.width / w;
        let i = (gr * self.width + gc) * self.channels;
        &self.values[i..i + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaReport {
    pub layers: Vec<String>,
    /// Row-major `layers × layers`.
    pub matrix: Vec<Vec<f64>>,
}

impl CkaReport {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["layer".to_string()];
        header.extend(self.layers.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.layers.iter().zip(&self.matrix) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.8}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Heat image with one `cell × cell` square per matrix entry.
    pub fn save_png(&self, path: &Path, cell: usize) -> Result<()> {
        let n = self.layers.len();
        let mut values = vec![0.0; n * n * cell * cell];
        for r in 0..n * cell {
            for c in 0..n * cell {
                values[r * n * cell + c] = self.matrix[r / cell][c / cell].clamp(0.0, 1.0);
            }
        }
        save_viridis_png(&values, n * cell, n * cell, path)
    }
}

/// Probed layer names, in report order.
pub fn probed_layers(model: &Model, bundle: &ClipWeightBundle) -> Vec<String> {
    let mut names: Vec<String> = (0..model.backbone.num_stages())
        .map(|i| format!("backbone.stage{i}"))
        .collect();
    names.extend(["csh.f_p", "csh.f_v_prime", "csh.f_v", "csh.f_norm", "csh.f_res", "csh.f_c"].map(String::from));
    names.extend((0..bundle.mini_encoder.blocks.len()).map(|i| format!("clip.block{i}")));
    names
}

fn image_activations(model: &Model, bundle: &ClipWeightBundle, sample: &Sample) -> Result<Vec<GridActivation>> {
    let trace = model.forward(&[&sample.image], bundle, ForwardMode::Eval)?;
    let mut acts = Vec::new();
    for stage in &trace.stages {
        let (_, h, w, c) = stage.dims4()?;
        acts.push(GridActivation::from_rows(&stage.reshape((h * w, c))?, h, w)?);
    }
    let (_, h, w) = trace.head.grid;
    let head = &trace.head;
    for t in [&head.f_p, &head.f_v_prime, &head.f_v, &head.f_bn, &head.f_res, &head.f_c] {
        acts.push(GridActivation::from_rows(t, h, w)?);
    }
    let (clip, enc) = encode_image_traced(&sample.image, bundle)?;
    for block in &enc.block_outputs {
        let tokens = block.dim(0)?;
        // Drop the CLS token; the rest is the patch grid.
        let patches = block.narrow(0, 1, tokens - 1)?;
        acts.push(GridActivation::from_rows(&patches, clip.grid_height, clip.grid_width)?);
    }
    Ok(acts)
}

/// Pairwise CKA between every probed layer over `positions_per_image` random
/// spatial positions of each image. Positions are drawn at image resolution and
/// mapped onto each layer's grid.
pub fn analyze_cka(
    model: &Model,
    bundle: &ClipWeightBundle,
    samples: &[Sample],
    positions_per_image: usize,
    seed: u64,
) -> Result<CkaReport> {
    if samples.len() < 2 || positions_per_image == 0 {
        return Err(Error::InvalidArgument(
            "CKA analysis needs at least two images and one position per image".into(),
        ));
    }
    let layers = probed_layers(model, bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers.len()];
    for sample in samples {
        let acts = image_activations(model, bundle, sample)?;
        let (h, w) = (sample.image.height, sample.image.width);
        for _ in 0..positions_per_image {
            let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
            for (layer, act) in rows.iter_mut().zip(&acts) {
                layer.push(act.at(r, c, h, w).to_vec());
            }
        }
    }
    let mats: Vec<DMatrix<f64>> = rows
        .iter()
        .map(|r| DMatrix::from_fn(r.len(), r[0].len(), |i, j| r[i][j]))
        .collect();
    let n = mats.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = cka(&mats[i], &mats[j])?;
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    Ok(CkaReport { layers, matrix })
}
