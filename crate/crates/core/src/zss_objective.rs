//! Pixel classification, segmentation losses, calibrated zero-shot inference and
//! the seen/unseen/harmonic IoU metrics.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, to_vec};
use crate::pseudo_supervision::ZSSplit;
use crate::raster::{LabelMap, IGNORE_LABEL};

/// Per-position class scores over a feature grid, row-major `(H'·W', M)`.
#[derive(Debug, Clone)]
pub struct PixelLogits {
    pub data: Tensor,
    pub height: usize,
    pub width: usize,
}

impl PixelLogits {
    pub fn num_classes(&self) -> usize {
        self.data.dims()[1]
    }
}

/// Dot product of every feature row with every classifier row.
pub fn pixel_logits(f_c: &Tensor, grid: (usize, usize), classifier: &Tensor) -> Result<PixelLogits> {
    let (positions, d) = f_c.dims2()?;
    let (_, dc) = classifier.dims2()?;
    if d != dc {
        return Err(Error::Dimension(format!(
            "features have {d} channels but the classifier has {dc}"
        )));
    }
    if positions != grid.0 * grid.1 {
        return Err(Error::Dimension(format!(
            "{positions} feature rows do not form a {}×{} grid",
            grid.0, grid.1
        )));
    }
    Ok(PixelLogits {
        data: f_c.matmul(&classifier.t()?)?,
        height: grid.0,
        width: grid.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Mean cross-entropy plus mean softmax focal loss over non-ignore positions.
///
/// Returns a zero scalar when every position is ignored.
pub fn seg_loss(p: &PixelLogits, y: &LabelMap, focal: FocalParams) -> Result<Tensor> {
    if (y.height, y.width) != (p.height, p.width) {
        return Err(Error::Dimension(format!(
            "{}×{} labels against {}×{} logits",
            y.height, y.width, p.height, p.width
        )));
    }
    let m = p.num_classes();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in y.labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= m {
            return Err(Error::InvalidArgument(format!(
                "label {l} is outside the {m} classifier classes"
            )));
        }
        rows.push(i as u32);
        targets.push(l as u32);
    }
    if rows.is_empty() {
        return Ok(Tensor::new(0f64, p.data.device())?);
    }
    let n = rows.len();
    let dev = p.data.device();
    let picked = p.data.index_select(&Tensor::new(rows.as_slice(), dev)?, 0)?;
    let log_p = log_softmax(&picked)?;
    let log_pt = log_p
        .gather(&Tensor::new(targets.as_slice(), dev)?.unsqueeze(1)?, 1)?
        .squeeze(1)?;
    let ce = (log_pt.sum_all()? * (-1.0 / n as f64))?;
    let modulator = (1.0 - log_pt.exp()?)?.powf(focal.gamma)?;
    let focal_term = ((modulator * &log_pt)?.sum_all()? * (-focal.alpha / n as f64))?;
    Ok((ce + focal_term)?)
}

/// `l_seg + l_sgd + lambda_sam · l_sam`.
pub fn total_loss(l_seg: &Tensor, l_sgd: &Tensor, l_sam: &Tensor, lambda_sam: f64) -> Result<Tensor> {
    Ok(((l_seg + l_sgd)? + (l_sam * lambda_sam)?)?)
}

/// Index of the largest value, ties to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot prediction: logits against every class, with `gamma` added to the
/// unseen-class logits before the per-position argmax.
pub fn calibrated_inference(
    f_c: &Tensor,
    grid: (usize, usize),
    a_full: &Tensor,
    split: &ZSSplit,
    gamma: f64,
) -> Result<LabelMap> {
    let n = a_full.dims2()?.0;
    if n != split.num_classes() {
        return Err(Error::Dimension(format!(
            "{n} class embeddings for a split of {} classes",
            split.num_classes()
        )));
    }
    let logits = pixel_logits(f_c, grid, a_full)?;
    let mut bias = vec![0.0; n];
    for &u in &split.unseen_ids {
        bias[u] = gamma;
    }
    let labels = to_vec(&logits.data)?
        .chunks(n)
        .map(|row| {
            let shifted: Vec<f64> = row.iter().zip(&bias).map(|(l, b)| l + b).collect();
            argmax(&shifted) as u8
        })
        .collect();
    LabelMap::new(grid.0, grid.1, labels)
}

/// Harmonic mean of seen and unseen IoU; zero when either is zero.
pub fn h_iou(s_iou: f64, u_iou: f64) -> f64 {
    if s_iou <= 0.0 || u_iou <= 0.0 {
        0.0
    } else {
        2.0 * s_iou * u_iou / (s_iou + u_iou)
    }
}

/// Dataset-level intersection/union counts; partial counts merge by summation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub gt_pixels: Vec<u64>,
    pub correct: u64,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            gt_pixels: vec![0; num_classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction {}×{} against ground truth {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.intersection.len();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= n {
                return Err(Error::InvalidArgument(format!("ground-truth label {g} out of range")));
            }
            self.total += 1;
            self.gt_pixels[g] += 1;
            self.union[g] += 1;
            if p == g {
                self.correct += 1;
                self.intersection[g] += 1;
            } else if p < n {
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        for (a, b) in self.gt_pixels.iter_mut().zip(&other.gt_pixels) {
            *a += b;
        }
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn report(&self, split: &ZSSplit) -> MetricsReport {
        let per_class_iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let mean_over = |ids: &[usize]| {
            let vals: Vec<f64> = ids.iter().filter_map(|&c| per_class_iou[c]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let s_iou = mean_over(&split.seen_ids);
        let u_iou = mean_over(&split.unseen_ids);
        MetricsReport {
            names: split.names.clone(),
            seen: (0..split.num_classes()).map(|c| !split.is_unseen(c)).collect(),
            per_class_iou,
            s_iou,
            u_iou,
            h_iou: h_iou(s_iou, u_iou),
            p_acc: if self.total == 0 {
                0.0
            } else {
                self.correct as f64 / self.total as f64
            },
            counts: self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub names: Vec<String>,
    pub seen: Vec<bool>,
    /// `None` for classes that never occur in predictions or ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub s_iou: f64,
    pub u_iou: f64,
    pub h_iou: f64,
    pub p_acc: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn summary_line(&self) -> String {
        format!(
            "sIoU={:.4} uIoU={:.4} hIoU={:.4} pAcc={:.4}",
            self.s_iou, self.u_iou, self.h_iou, self.p_acc
        )
    }

    /// `class,iou,seen_flag` rows; undefined IoUs are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "iou", "seen_flag"])?;
        for ((name, iou), seen) in self.names.iter().zip(&self.per_class_iou).zip(&self.seen) {
            let iou = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([name.as_str(), iou.as_str(), if *seen { "1" } else { "0" }])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Metrics from summed per-image counts over the whole dataset.
pub fn compute_metrics(preds: &[LabelMap], gts: &[LabelMap], split: &ZSSplit) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts = ConfusionCounts::new(split.num_classes());
    for (p, g) in preds.iter().zip(gts) {
        counts.add(p, g)?;
    }
    Ok(counts.report(split))
}

/// Count of positions predicted as any unseen class.
pub fn unseen_prediction_count(preds: &[LabelMap], split: &ZSSplit) -> usize {
    preds
        .iter()
        .flat_map(|p| p.labels.iter())
        .filter(|&&l| split.is_unseen(l as usize))
        .count()
}
