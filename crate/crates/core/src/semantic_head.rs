//! The semantic head: a trainable MLP into the frozen encoder's width, frozen
//! value+FFN sub-blocks, a trainable normalization, a residual connection and
//! the frozen visual projection.

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::DenseFeatureMap;
use crate::clip_adapter::{ClipWeightBundle, VEncoderWeights};
use crate::error::{Error, Result};
use crate::nn::{gelu, layer_norm, linear, normal_tensor, ones, tensor_from, to_vec, zeros, ParamSet, LAYER_NORM_EPS};

/// Normalization applied to the VEncoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "bn")]
    BatchNorm,
    #[serde(rename = "gn")]
    GroupNorm,
    /// The encoder's final layer norm, frozen.
    #[serde(rename = "ln-frozen")]
    LayerNormFrozen,
    #[serde(rename = "ln-learn")]
    LayerNormLearned,
    #[serde(rename = "none")]
    None,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [
        NormKind::BatchNorm,
        NormKind::GroupNorm,
        NormKind::LayerNormFrozen,
        NormKind::LayerNormLearned,
        NormKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::BatchNorm => "bn",
            NormKind::GroupNorm => "gn",
            NormKind::LayerNormFrozen => "ln-frozen",
            NormKind::LayerNormLearned => "ln-learn",
            NormKind::None => "none",
        }
    }

    fn has_affine(self) -> bool {
        matches!(
            self,
            NormKind::BatchNorm | NormKind::GroupNorm | NormKind::LayerNormLearned
        )
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown normalization `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CSHConfig {
    pub norm: NormKind,
    /// Number of frozen VEncoder blocks, taken from the end of the bundle's stack.
    pub vencoder_blocks: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub gn_groups: usize,
    pub seed: u64,
}

impl Default for CSHConfig {
    fn default() -> Self {
        Self {
            norm: NormKind::BatchNorm,
            vencoder_blocks: 1,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            gn_groups: 4,
            seed: 0,
        }
    }
}

/// Per-channel statistics of one train-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

/// Trainable state of the head. Frozen tensors live in the [`ClipWeightBundle`].
#[derive(Debug, Clone)]
pub struct CSHParams {
    pub config: CSHConfig,
    pub in_channels: usize,
    pub d_vis: usize,
    /// `proj.w1 (C, d_vis)`, `proj.b1`, `proj.w2 (d_vis, d_vis)`, `proj.b2`,
    /// and `norm.scale` / `norm.shift` when the normalization is learnable.
    pub params: ParamSet,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub bn_batches_tracked: u64,
}

impl CSHParams {
    pub fn init(config: CSHConfig, in_channels: usize, d_vis: usize) -> Result<Self> {
        if config.norm == NormKind::GroupNorm
            && (config.gn_groups == 0 || d_vis % config.gn_groups != 0)
        {
            return Err(Error::InvalidArgument(format!(
                "{} groups do not divide width {d_vis}",
                config.gn_groups
            )));
        }
        if config.vencoder_blocks > 3 {
            return Err(Error::InvalidArgument("at most 3 VEncoder blocks are supported".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        params.insert(
            "proj.w1",
            normal_tensor(&mut rng, &[in_channels, d_vis], (1.0 / in_channels as f64).sqrt())?,
        )?;
        params.insert("proj.b1", zeros(&[d_vis])?)?;
        params.insert(
            "proj.w2",
            normal_tensor(&mut rng, &[d_vis, d_vis], (1.0 / d_vis as f64).sqrt())?,
        )?;
        params.insert("proj.b2", zeros(&[d_vis])?)?;
        if config.norm.has_affine() {
            params.insert("norm.scale", ones(&[d_vis])?)?;
            params.insert("norm.shift", zeros(&[d_vis])?)?;
        }
        Ok(Self {
            config,
            in_channels,
            d_vis,
            params,
            bn_running_mean: vec![0.0; d_vis],
            bn_running_var: vec![1.0; d_vis],
            bn_batches_tracked: 0,
        })
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn absorb_batch_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for (r, s) in self.bn_running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.bn_running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
        self.bn_batches_tracked += 1;
    }
}

/// Intermediate activations of the head, one row per `(b, h, w)` position.
#[derive(Debug, Clone)]
pub struct CSHTrace {
    pub grid: (usize, usize, usize),
    pub f_p: Tensor,
    pub f_v_prime: Tensor,
    pub f_v: Tensor,
    pub f_bn: Tensor,
    pub f_res: Tensor,
    /// `(B·H'·W', d_emb)`
    pub f_c: Tensor,
    pub batch_stats: Option<BatchStats>,
}

impl CSHTrace {
    /// Rows of `f_c` belonging to batch item `b`, `(H'·W', d_emb)`.
    pub fn f_c_of(&self, b: usize) -> Result<Tensor> {
        let (_, h, w) = self.grid;
        Ok(self.f_c.narrow(0, b * h * w, h * w)?)
    }
}

/// One value+FFN sub-block applied independently at each row:
/// `x' = V(LN1(x)) + x`, `y = FFN(LN2(x')) + x'`.
pub fn vencoder_forward(x: &Tensor, w: &VEncoderWeights) -> Result<(Tensor, Tensor)> {
    let d = x.dim(D::Minus1)?;
    if d != w.d_vis() {
        return Err(Error::Dimension(format!(
            "feature width {d} does not match VEncoder width {}",
            w.d_vis()
        )));
    }
    let h = layer_norm(x, w.ln1_scale.tensor(), w.ln1_bias.tensor(), LAYER_NORM_EPS)?;
    let f_v_prime = (linear(&h, w.value_weight.tensor(), Some(w.value_bias.tensor()))? + x)?;
    let h = layer_norm(
        &f_v_prime,
        w.ln2_scale.tensor(),
        w.ln2_bias.tensor(),
        LAYER_NORM_EPS,
    )?;
    let h = gelu(&linear(&h, w.ffn_w1.tensor(), Some(w.ffn_b1.tensor()))?)?;
    let f_v = (linear(&h, w.ffn_w2.tensor(), Some(w.ffn_b2.tensor()))? + &f_v_prime)?;
    Ok((f_v_prime, f_v))
}

fn batch_norm(
    x: &Tensor,
    params: &CSHParams,
    mode: ForwardMode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let scale = params.params.get("norm.scale");
    let shift = params.params.get("norm.shift");
    let eps = params.config.bn_epsilon;
    let (n, d) = x.dims2()?;
    let (normed, stats) = match mode {
        ForwardMode::Train => {
            let mean = x.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let normed = centered.broadcast_div(&(&var + eps)?.sqrt()?)?;
            let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            let stats = BatchStats {
                mean: to_vec(&mean)?,
                var: to_vec(&var)?.into_iter().map(|v| v * correction).collect(),
            };
            (normed, Some(stats))
        }
        ForwardMode::Eval => {
            if params.bn_batches_tracked == 0 {
                return Err(Error::UninitializedStats);
            }
            let mean = tensor_from(params.bn_running_mean.clone(), &[1, d])?;
            let std: Vec<f64> = params
                .bn_running_var
                .iter()
                .map(|v| (v + eps).sqrt())
                .collect();
            let std = tensor_from(std, &[1, d])?;
            (x.broadcast_sub(&mean)?.broadcast_div(&std)?, None)
        }
    };
    Ok((normed.broadcast_mul(scale)?.broadcast_add(shift)?, stats))
}

fn group_norm(x: &Tensor, params: &CSHParams, grid: (usize, usize, usize)) -> Result<Tensor> {
    let (b, h, w) = grid;
    let d = params.d_vis;
    let g = params.config.gn_groups;
    let grouped = x
        .reshape((b, h * w, g, d / g))?
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .reshape((b, g, h * w * (d / g)))?;
    let mean = grouped.mean_keepdim(D::Minus1)?;
    let centered = grouped.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + params.config.bn_epsilon)?.sqrt()?)?;
    let back = normed
        .reshape((b, g, h * w, d / g))?
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .reshape((b * h * w, d))?;
    Ok(back
        .broadcast_mul(params.params.get("norm.scale"))?
        .broadcast_add(params.params.get("norm.shift"))?)
}

/// Full head forward. In train mode with batch normalization the batch
/// statistics are returned in the trace; the caller folds them into the running
/// estimates with [`CSHParams::absorb_batch_stats`].
pub fn csh_forward(
    f: &DenseFeatureMap,
    params: &CSHParams,
    bundle: &ClipWeightBundle,
    mode: ForwardMode,
) -> Result<CSHTrace> {
    if f.channels() != params.in_channels {
        return Err(Error::Dimension(format!(
            "feature map has {} channels, head expects {}",
            f.channels(),
            params.in_channels
        )));
    }
    if bundle.d_vis != params.d_vis {
        return Err(Error::Dimension(format!(
            "bundle width {} does not match head width {}",
            bundle.d_vis, params.d_vis
        )));
    }
    let grid = (f.batch(), f.height(), f.width());
    let x = f.rows()?;
    let p = &params.params;
    let hidden = gelu(&linear(&x, p.get("proj.w1"), Some(p.get("proj.b1")))?)?;
    let f_p = linear(&hidden, p.get("proj.w2"), Some(p.get("proj.b2")))?;

    let mut f_v_prime = f_p.clone();
    let mut f_v = f_p.clone();
    for block in bundle.vencoder_blocks(params.config.vencoder_blocks)? {
        let (vp, v) = vencoder_forward(&f_v, block)?;
        f_v_prime = vp;
        f_v = v;
    }

    let (f_bn, batch_stats) = match params.config.norm {
        NormKind::BatchNorm => batch_norm(&f_v, params, mode)?,
        NormKind::GroupNorm => (group_norm(&f_v, params, grid)?, None),
        NormKind::LayerNormFrozen => {
            let enc = &bundle.mini_encoder;
            let y = layer_norm(
                &f_v,
                enc.ln_post_scale.tensor(),
                enc.ln_post_bias.tensor(),
                LAYER_NORM_EPS,
            )?;
            (y, None)
        }
        NormKind::LayerNormLearned => {
            let y = layer_norm(&f_v, p.get("norm.scale"), p.get("norm.shift"), LAYER_NORM_EPS)?;
            (y, None)
        }
        NormKind::None => (f_v.clone(), None),
    };
    let f_res = (&f_p + &f_bn)?;
    let f_c = bundle.project(&f_res)?;
    Ok(CSHTrace {
        grid,
        f_p,
        f_v_prime,
        f_v,
        f_bn,
        f_res,
        f_c,
        batch_stats,
    })
}

/// Hex SHA-256 over every frozen tensor's name, shape and stored bytes.
pub fn frozen_fingerprint(bundle: &ClipWeightBundle) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in bundle.named_tensors() {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((tensor.shape().len() as u64).to_le_bytes());
        for &d in tensor.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        hasher.update(tensor.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
