//! Reference convolutional backbone producing dense feature maps.
//!
//! Any extractor can be substituted as long as it honours the contract of
//! [`extract_features`]: an `(B, 3, H, W)` batch maps to an `(B, H/s, W/s, C)` grid.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, normal_tensor, zeros, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Total downsampling factor: 1, 2 or 4.
    pub stride: usize,
    /// Output channel count.
    pub channels: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            channels: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    fn stage_strides(&self) -> Result<[usize; 3]> {
        match self.stride {
            1 => Ok([1, 1, 1]),
            2 => Ok([1, 1, 2]),
            4 => Ok([1, 2, 2]),
            s => Err(Error::InvalidArgument(format!(
                "backbone stride must be 1, 2 or 4, got {s}"
            ))),
        }
    }

    fn stage_widths(&self) -> [usize; 3] {
        [16, 32, self.channels]
    }
}

/// An `(B, H', W', C)` feature grid together with its stride relative to the input.
#[derive(Debug, Clone)]
pub struct DenseFeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl DenseFeatureMap {
    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[3]
    }

    /// `(B·H'·W', C)` view with one row per position.
    pub fn rows(&self) -> Result<Tensor> {
        let (b, h, w, c) = self.data.dims4()?;
        Ok(self.data.reshape((b * h * w, c))?)
    }
}

/// Trainable weights of the three-stage convolutional backbone.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl BackboneParams {
    /// Kaiming-normal convolution weights and zero biases, seeded by `config.seed`.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.stage_strides()?;
        if config.channels == 0 {
            return Err(Error::InvalidArgument("backbone channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut in_ch = 3;
        for (i, out_ch) in config.stage_widths().into_iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            let w = normal_tensor(&mut rng, &[out_ch, in_ch, 3, 3], (2.0 / fan_in).sqrt())?;
            params.insert(format!("stage{i}.weight"), w)?;
            params.insert(format!("stage{i}.bias"), zeros(&[out_ch])?)?;
            in_ch = out_ch;
        }
        Ok(Self { config, params })
    }

    pub fn num_stages(&self) -> usize {
        3
    }
}

/// 3×3 convolution with zero padding 1 on a channels-last `(B, H, W, C)` input,
/// lowered to one matrix product over gathered neighbourhoods.
pub fn conv3x3_nhwc(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (out, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::Dimension(format!(
            "kernel {out}×{wc}×{kh}×{kw} does not fit {c} input channels"
        )));
    }
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
    let rows = Tensor::arange_step(0u32, (ho * stride) as u32, stride as u32, x.device())?;
    let cols = Tensor::arange_step(0u32, (wo * stride) as u32, stride as u32, x.device())?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            let mut tap = padded
                .narrow(1, dy, (ho - 1) * stride + 1)?
                .narrow(2, dx, (wo - 1) * stride + 1)?;
            if stride > 1 {
                tap = tap
                    .contiguous()?
                    .index_select(&rows, 1)?
                    .index_select(&cols, 2)?;
            }
            taps.push(tap);
        }
    }
    // (B, H', W', C, 9) flattens to the (C, ky, kx) order of the kernel.
    let patches = Tensor::stack(&taps, 4)?.reshape((b * ho * wo, c * 9))?;
    let kernel = weight.reshape((out, c * 9))?.t()?;
    let y = patches.matmul(&kernel)?.broadcast_add(bias)?;
    Ok(y.reshape((b, ho, wo, out))?)
}

/// Runs the backbone and returns the output of every stage as `(B, H_i, W_i, C_i)`.
pub fn extract_features_traced(
    images: &Tensor,
    params: &BackboneParams,
) -> Result<(DenseFeatureMap, Vec<Tensor>)> {
    let (_, ch, h, w) = images.dims4()?;
    let stride = params.config.stride;
    if ch != 3 {
        return Err(Error::Dimension(format!("expected 3 input channels, got {ch}")));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Dimension(format!(
            "{h}×{w} input is not divisible by backbone stride {stride}"
        )));
    }
    let strides = params.config.stage_strides()?;
    let mut x = images.permute((0, 2, 3, 1))?.contiguous()?;
    let mut stages = Vec::with_capacity(3);
    for (i, s) in strides.into_iter().enumerate() {
        let weight = params.params.get(&format!("stage{i}.weight"));
        let bias = params.params.get(&format!("stage{i}.bias"));
        x = gelu(&conv3x3_nhwc(&x, weight, bias, s)?)?;
        stages.push(x.clone());
    }
    Ok((DenseFeatureMap { data: x, stride }, stages))
}

/// Dense features of an `(B, 3, H, W)` batch.
pub fn extract_features(images: &Tensor, params: &BackboneParams) -> Result<DenseFeatureMap> {
    extract_features_traced(images, params).map(|(f, _)| f)
}
