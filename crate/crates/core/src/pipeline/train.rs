use std::fs::File;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::{DatasetManifest, Sample};
use super::model::Model;
use crate::clip_adapter::{encode_image, select_rows, ClipImageOutputs, ClipWeightBundle};
use crate::error::{Error, Result};
use crate::nn::{scalar, tensor_from};
use crate::pseudo_supervision::{
    compute_prototypes, generate_pseudo_mask, sam_loss, split_prototypes, tensor_rows, PseudoMask, SplitMode,
    ZSSplit,
};
use crate::raster::{LabelMap, IGNORE_LABEL};
use crate::selective_distillation::{decayed_k, select_global_feature, sgd_loss};
use crate::semantic_head::{frozen_fingerprint, ForwardMode};
use crate::zss_objective::{pixel_logits, seg_loss, total_loss};

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_seg: f64,
    pub l_sgd: f64,
    pub l_sam: f64,
    pub total: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

/// Per-image data that does not depend on the trainable parameters.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: Sample,
    pub clip: ClipImageOutputs,
    pub pseudo: PseudoMask,
    /// Pseudo labels at feature resolution in training-classifier space:
    /// seen indices first, then latent IDs (inductive) or unseen indices (transductive).
    pub target: LabelMap,
}

/// Encodes every image, builds its pseudo mask and aligns the mask to the feature grid.
pub fn prepare_samples(
    samples: Vec<Sample>,
    split: &ZSSplit,
    bundle: &ClipWeightBundle,
    cfg: &TrainConfig,
) -> Result<Vec<PreparedSample>> {
    let a_s = class_rows(bundle, split, &split.seen_ids)?;
    let a_u = class_rows(bundle, split, &split.unseen_ids)?;
    let unseen_rows = tensor_rows(&a_u)?;
    let stride = cfg.backbone.stride;
    let mut pseudo_cfg = cfg.pseudo_config();
    let base_seed = pseudo_cfg.seed;
    samples
        .into_iter()
        .enumerate()
        .map(|(i, sample)| {
            let clip = encode_image(&sample.image, bundle)?;
            let seen_only = split.training_labels(&sample.labels);
            pseudo_cfg.seed = base_seed.wrapping_add(i as u64);
            let pseudo = generate_pseudo_mask(
                &clip.patch_tokens,
                (clip.grid_height, clip.grid_width),
                &seen_only,
                &a_s,
                &pseudo_cfg,
            )?;
            let full = match split.mode {
                SplitMode::Inductive => pseudo.labels.clone(),
                SplitMode::Transductive => pseudo.assign_latents_to_unseen(&unseen_rows)?,
            };
            let target = full.downsample(stride)?;
            Ok(PreparedSample {
                sample,
                clip,
                pseudo,
                target,
            })
        })
        .collect()
}

/// Text-embedding rows for the given global class IDs.
pub fn class_rows(bundle: &ClipWeightBundle, split: &ZSSplit, ids: &[usize]) -> Result<Tensor> {
    let names: Vec<&str> = ids.iter().map(|&i| split.names[i].as_str()).collect();
    crate::clip_adapter::embed_class_names(&names, bundle)
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub bundle: &'a ClipWeightBundle,
    pub model: Model,
    pub split: ZSSplit,
    pub samples: Vec<PreparedSample>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    a_s: Tensor,
    a_u: Tensor,
    optimizer: AdamW,
    fingerprint: String,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, manifest: &DatasetManifest, bundle: &'a ClipWeightBundle) -> Result<Self> {
        cfg.validate()?;
        let split = manifest.split(cfg.mode)?;
        let samples = manifest.load_samples()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset has no images".into()));
        }
        let prepared = prepare_samples(samples, &split, bundle, &cfg)?;
        let model = Model::init(&cfg, bundle)?;
        let optimizer = AdamW::new(
            model.trainable_vars(),
            ParamsAdamW {
                lr: cfg.optim.lr,
                beta1: cfg.optim.beta1,
                beta2: cfg.optim.beta2,
                eps: cfg.optim.eps,
                weight_decay: cfg.optim.weight_decay,
            },
        )?;
        Ok(Self {
            a_s: class_rows(bundle, &split, &split.seen_ids)?,
            a_u: class_rows(bundle, &split, &split.unseen_ids)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3)),
            fingerprint: frozen_fingerprint(bundle),
            cfg,
            bundle,
            model,
            split,
            samples: prepared,
            iteration: 0,
            optimizer,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.batch_size.min(self.samples.len())
    }

    fn learning_rate(&self) -> f64 {
        let warmup = (self.cfg.optim.warmup_fraction * self.cfg.iterations as f64).ceil();
        if warmup <= 0.0 {
            self.cfg.optim.lr
        } else {
            self.cfg.optim.lr * ((self.iteration + 1) as f64 / warmup).min(1.0)
        }
    }

    /// Forward pass and all loss terms for the given images at the current iteration.
    pub fn losses(&mut self, batch: &[usize]) -> Result<(Tensor, LossRecord, Option<crate::semantic_head::BatchStats>)> {
        let images: Vec<_> = batch.iter().map(|&i| &self.samples[i].sample.image).collect();
        let trace = self.model.forward(&images, self.bundle, ForwardMode::Train)?;
        let (_, h, w) = trace.head.grid;
        let n_seen = self.split.num_seen();
        let k = decayed_k(self.iteration, &self.cfg.decay_schedule(), h * w);

        let mut f_g = Vec::with_capacity(batch.len());
        let mut c_g = Vec::with_capacity(batch.len());
        let mut seg_terms = Vec::with_capacity(batch.len());
        let mut sam_terms = Vec::new();
        for (b, &i) in batch.iter().enumerate() {
            let prepared = &self.samples[i];
            let f_c = trace.head.f_c_of(b)?;
            let cls = &prepared.clip.cls_token;
            let (_, global) = select_global_feature(&f_c, cls, k, self.cfg.sgd.tau, &mut self.rng, self.cfg.sgd.noise)?;
            f_g.push(global);
            c_g.push(cls.clone());

            let protos = compute_prototypes(&f_c, &prepared.target, n_seen)?;
            let ((seen_ids, f_l_s), (latent_ids, f_l_u)) = split_prototypes(&protos)?;
            if !seen_ids.is_empty() {
                let present: Vec<u32> = seen_ids.iter().map(|&id| id as u32).collect();
                let a_present = select_rows(&self.a_s, &present)?;
                sam_terms.push(sam_loss(&f_l_s, &a_present, cls, self.cfg.sam.tau_f, self.cfg.sam.tau_c)?);
            }
            let (classifier, labels) = match self.split.mode {
                SplitMode::Inductive => {
                    // Latent IDs become columns after the seen classes, in ID order.
                    let mut remap = [IGNORE_LABEL; 256];
                    for id in 0..n_seen {
                        remap[id] = id as u8;
                    }
                    for (j, &id) in latent_ids.iter().enumerate() {
                        remap[id as usize] = (n_seen + j) as u8;
                    }
                    let labels = prepared.target.labels.iter().map(|&l| remap[l as usize]).collect();
                    (
                        Tensor::cat(&[&self.a_s, &f_l_u], 0)?,
                        LabelMap::new(h, w, labels)?,
                    )
                }
                SplitMode::Transductive => (Tensor::cat(&[&self.a_s, &self.a_u], 0)?, prepared.target.clone()),
            };
            let logits = pixel_logits(&f_c, (h, w), &classifier)?;
            seg_terms.push(seg_loss(&logits, &labels, self.cfg.focal())?);
        }
        let l_sgd = sgd_loss(&Tensor::stack(&f_g, 0)?, &Tensor::stack(&c_g, 0)?, self.cfg.sgd.tau)?;
        let l_seg = mean(&seg_terms)?;
        let l_sam = if sam_terms.is_empty() {
            tensor_from(vec![0.0], &[])?
        } else {
            mean(&sam_terms)?
        };
        let total = total_loss(&l_seg, &l_sgd, &l_sam, self.cfg.lambda_sam())?;
        let record = LossRecord {
            iteration: self.iteration,
            l_seg: scalar(&l_seg)?,
            l_sgd: scalar(&l_sgd)?,
            l_sam: scalar(&l_sam)?,
            total: scalar(&total)?,
            k,
        };
        Ok((total, record, trace.head.batch_stats))
    }

    /// Runs one optimization step and returns its loss record.
    pub fn step(&mut self) -> Result<LossRecord> {
        let size = self.batch_size();
        let batch = rand::seq::index::sample(&mut self.rng, self.samples.len(), size).into_vec();
        let (total, record, stats) = self.losses(&batch)?;
        if ![record.l_seg, record.l_sgd, record.l_sam, record.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        self.optimizer.set_learning_rate(self.learning_rate());
        self.optimizer.backward_step(&total)?;
        if let Some(stats) = stats {
            self.model.csh.absorb_batch_stats(&stats);
        }
        self.iteration += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let found = frozen_fingerprint(self.bundle);
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        Checkpoint::capture(&self.model, self.iteration, &self.rng, &self.fingerprint, &self.cfg)
    }
}

fn mean(terms: &[Tensor]) -> Result<Tensor> {
    let n = terms.len() as f64;
    Ok((Tensor::stack(terms, 0)?.sum_all()? / n)?)
}

/// Result of a complete run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Paths of every checkpoint written, in order; the last is the final one.
    pub checkpoint_paths: Vec<PathBuf>,
}

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT_FILE: &str = "checkpoint.json";

/// Trains for `cfg.iterations` steps, appending to `loss_log.csv` in the output
/// directory and writing checkpoints at the configured cadence plus a final one.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest, bundle: &ClipWeightBundle) -> Result<TrainOutcome> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trainer = Trainer::new(cfg.clone(), manifest, bundle)?;
    let log_path = out.join(LOSS_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    let mut checkpoint_paths = Vec::new();
    for _ in 0..cfg.iterations {
        let record = trainer.step()?;
        writer.serialize(record)?;
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        log::debug!(
            "iteration {}: total {:.5} (seg {:.5}, sgd {:.5}, sam {:.5}, K {})",
            record.iteration,
            record.total,
            record.l_seg,
            record.l_sgd,
            record.l_sam,
            record.k
        );
        log.push(record);
        if cfg.checkpoint_every > 0 && trainer.iteration % cfg.checkpoint_every == 0 && trainer.iteration < cfg.iterations {
            let path = out.join(format!("checkpoint_{:06}.json", trainer.iteration));
            trainer.checkpoint()?.save(&path)?;
            checkpoint_paths.push(path);
        }
    }
    let checkpoint = trainer.checkpoint()?;
    let path = out.join(FINAL_CHECKPOINT_FILE);
    checkpoint.save(&path)?;
    checkpoint_paths.push(path);
    Ok(TrainOutcome {
        checkpoint,
        log,
        checkpoint_paths,
    })
}

/// Reads a loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
