//! Frozen vision-language weights: the bundle format, a miniature CLIP-style
//! visual encoder, and lookup of class text embeddings.

mod bundle;
mod mini_clip;

use candle_core::{Tensor, D};

pub use bundle::{load_weight_bundle, save_weight_bundle, Manifest, TensorEntry, BUNDLE_FORMAT};
pub use mini_clip::{make_mini_clip, MiniClipSpec};

use crate::error::{Error, Result};
use crate::nn::{gelu, layer_norm, linear, softmax, LAYER_NORM_EPS};
use crate::raster::Image;

/// Per-channel pixel statistics used to normalize images before patch embedding.
pub const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// A frozen tensor kept at its on-disk precision, with an f64 view for compute.
#[derive(Debug, Clone)]
pub struct FrozenTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    tensor: Tensor,
}

impl FrozenTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        let values = data.iter().map(|&v| v as f64).collect();
        let tensor = crate::nn::tensor_from(values, &shape)?;
        Ok(Self {
            shape,
            data,
            tensor,
        })
    }

    /// Rounds f64 values to f32 storage.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Little-endian f32 bytes, the on-disk representation.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// The value and feed-forward branches of a frozen transformer block, with
/// query/key attention removed.
#[derive(Debug, Clone)]
pub struct VEncoderWeights {
    pub ln1_scale: FrozenTensor,
    pub ln1_bias: FrozenTensor,
    pub value_weight: FrozenTensor,
    pub value_bias: FrozenTensor,
    pub ln2_scale: FrozenTensor,
    pub ln2_bias: FrozenTensor,
    pub ffn_w1: FrozenTensor,
    pub ffn_b1: FrozenTensor,
    pub ffn_w2: FrozenTensor,
    pub ffn_b2: FrozenTensor,
}

impl VEncoderWeights {
    pub(crate) const FIELDS: [&'static str; 10] = [
        "ln1_scale",
        "ln1_bias",
        "value_weight",
        "value_bias",
        "ln2_scale",
        "ln2_bias",
        "ffn_w1",
        "ffn_b1",
        "ffn_w2",
        "ffn_b2",
    ];

    pub(crate) fn expected_shape(field: &str, d_vis: usize) -> Vec<usize> {
        match field {
            "value_weight" => vec![d_vis, d_vis],
            "ffn_w1" => vec![d_vis, 4 * d_vis],
            "ffn_b1" => vec![4 * d_vis],
            "ffn_w2" => vec![4 * d_vis, d_vis],
            _ => vec![d_vis],
        }
    }

    pub(crate) fn tensors(&self) -> [&FrozenTensor; 10] {
        [
            &self.ln1_scale,
            &self.ln1_bias,
            &self.value_weight,
            &self.value_bias,
            &self.ln2_scale,
            &self.ln2_bias,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ]
    }

    pub(crate) fn from_fields(mut take: impl FnMut(&str) -> Result<FrozenTensor>) -> Result<Self> {
        Ok(Self {
            ln1_scale: take("ln1_scale")?,
            ln1_bias: take("ln1_bias")?,
            value_weight: take("value_weight")?,
            value_bias: take("value_bias")?,
            ln2_scale: take("ln2_scale")?,
            ln2_bias: take("ln2_bias")?,
            ffn_w1: take("ffn_w1")?,
            ffn_b1: take("ffn_b1")?,
            ffn_w2: take("ffn_w2")?,
            ffn_b2: take("ffn_b2")?,
        })
    }

    pub fn d_vis(&self) -> usize {
        self.value_weight.shape()[0]
    }
}

/// A standard pre-norm transformer block of the miniature visual encoder.
#[derive(Debug, Clone)]
pub struct EncoderBlockWeights {
    pub ln1_scale: FrozenTensor,
    pub ln1_bias: FrozenTensor,
    pub q_weight: FrozenTensor,
    pub q_bias: FrozenTensor,
    pub k_weight: FrozenTensor,
    pub k_bias: FrozenTensor,
    pub v_weight: FrozenTensor,
    pub v_bias: FrozenTensor,
    pub out_weight: FrozenTensor,
    pub out_bias: FrozenTensor,
    pub ln2_scale: FrozenTensor,
    pub ln2_bias: FrozenTensor,
    pub mlp_w1: FrozenTensor,
    pub mlp_b1: FrozenTensor,
    pub mlp_w2: FrozenTensor,
    pub mlp_b2: FrozenTensor,
}

impl EncoderBlockWeights {
    pub(crate) const FIELDS: [&'static str; 16] = [
        "ln1_scale",
        "ln1_bias",
        "q_weight",
        "q_bias",
        "k_weight",
        "k_bias",
        "v_weight",
        "v_bias",
        "out_weight",
        "out_bias",
        "ln2_scale",
        "ln2_bias",
        "mlp_w1",
        "mlp_b1",
        "mlp_w2",
        "mlp_b2",
    ];

    pub(crate) fn expected_shape(field: &str, d_vis: usize) -> Vec<usize> {
        match field {
            "q_weight" | "k_weight" | "v_weight" | "out_weight" => vec![d_vis, d_vis],
            "mlp_w1" => vec![d_vis, 4 * d_vis],
            "mlp_b1" => vec![4 * d_vis],
            "mlp_w2" => vec![4 * d_vis, d_vis],
            _ => vec![d_vis],
        }
    }

    pub(crate) fn tensors(&self) -> [&FrozenTensor; 16] {
        [
            &self.ln1_scale,
            &self.ln1_bias,
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.out_weight,
            &self.out_bias,
            &self.ln2_scale,
            &self.ln2_bias,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    pub(crate) fn from_fields(mut take: impl FnMut(&str) -> Result<FrozenTensor>) -> Result<Self> {
        Ok(Self {
            ln1_scale: take("ln1_scale")?,
            ln1_bias: take("ln1_bias")?,
            q_weight: take("q_weight")?,
            q_bias: take("q_bias")?,
            k_weight: take("k_weight")?,
            k_bias: take("k_bias")?,
            v_weight: take("v_weight")?,
            v_bias: take("v_bias")?,
            out_weight: take("out_weight")?,
            out_bias: take("out_bias")?,
            ln2_scale: take("ln2_scale")?,
            ln2_bias: take("ln2_bias")?,
            mlp_w1: take("mlp_w1")?,
            mlp_b1: take("mlp_b1")?,
            mlp_w2: take("mlp_w2")?,
            mlp_b2: take("mlp_b2")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MiniEncoderWeights {
    /// `(3·p², d_vis)`, patch pixels flattened as (row, col, channel).
    pub patch_embed: FrozenTensor,
    pub class_embedding: FrozenTensor,
    pub blocks: Vec<EncoderBlockWeights>,
    pub ln_post_scale: FrozenTensor,
    pub ln_post_bias: FrozenTensor,
}

/// The frozen final projection into the joint embedding space.
#[derive(Debug, Clone)]
pub struct VisualProjection {
    pub weight: FrozenTensor,
    pub bias: FrozenTensor,
}

/// Every frozen tensor the pipeline consumes, plus the metadata needed to interpret them.
#[derive(Debug, Clone)]
pub struct ClipWeightBundle {
    pub d_vis: usize,
    pub d_emb: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub class_names: Vec<String>,
    /// Value+FFN sub-blocks; the last entry is derived from the encoder's final block.
    pub vencoder: Vec<VEncoderWeights>,
    pub visual_projection: VisualProjection,
    /// `(N, d_emb)`, rows unit-norm, ordered like `class_names`.
    pub text_embeddings: FrozenTensor,
    pub mini_encoder: MiniEncoderWeights,
}

impl ClipWeightBundle {
    /// All tensors with their canonical names, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &FrozenTensor)> {
        let mut out = Vec::new();
        let enc = &self.mini_encoder;
        out.push(("mini.patch_embed".to_string(), &enc.patch_embed));
        out.push(("mini.class_embedding".to_string(), &enc.class_embedding));
        for (i, block) in enc.blocks.iter().enumerate() {
            for (field, t) in EncoderBlockWeights::FIELDS.iter().zip(block.tensors()) {
                out.push((format!("mini.blocks.{i}.{field}"), t));
            }
        }
        out.push(("mini.ln_post.scale".to_string(), &enc.ln_post_scale));
        out.push(("mini.ln_post.bias".to_string(), &enc.ln_post_bias));
        for (i, v) in self.vencoder.iter().enumerate() {
            for (field, t) in VEncoderWeights::FIELDS.iter().zip(v.tensors()) {
                out.push((format!("vencoder.{i}.{field}"), t));
            }
        }
        out.push(("visual_projection.weight".to_string(), &self.visual_projection.weight));
        out.push(("visual_projection.bias".to_string(), &self.visual_projection.bias));
        out.push(("text_embeddings".to_string(), &self.text_embeddings));
        out
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The last `count` VEncoder blocks, in forward order.
    pub fn vencoder_blocks(&self, count: usize) -> Result<&[VEncoderWeights]> {
        if count > self.vencoder.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {count} VEncoder blocks, bundle holds {}",
                self.vencoder.len()
            )));
        }
        Ok(&self.vencoder[self.vencoder.len() - count..])
    }

    /// Projects `(N, d_vis)` rows into the joint space.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        linear(
            x,
            self.visual_projection.weight.tensor(),
            Some(self.visual_projection.bias.tensor()),
        )
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }
}

/// CLS and patch tokens of one image after projection into the joint space.
#[derive(Debug, Clone)]
pub struct ClipImageOutputs {
    /// `(d_emb)`
    pub cls_token: Tensor,
    /// `(P, d_emb)`, patches in row-major grid order.
    pub patch_tokens: Tensor,
    pub grid_height: usize,
    pub grid_width: usize,
}

/// Token activations after each encoder block, `(P + 1, d_vis)` with the class token first.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub block_outputs: Vec<Tensor>,
}

/// Splits an image into non-overlapping `p × p` patches flattened as (row, col, channel)
/// after per-channel normalization. Returns `(P, 3·p²)`.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Tensor> {
    let p = patch_size;
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::Dimension(format!(
            "{}×{} image is not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let mut values = Vec::with_capacity(gh * gw * 3 * p * p);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let px = image.pixel(pr * p + dy, pc * p + dx);
                    for ch in 0..3 {
                        values.push((px[ch] - PIXEL_MEAN[ch]) / PIXEL_STD[ch]);
                    }
                }
            }
        }
    }
    crate::nn::tensor_from(values, &[gh * gw, 3 * p * p])
}

fn attention(x: &Tensor, block: &EncoderBlockWeights, num_heads: usize) -> Result<Tensor> {
    let (tokens, d) = x.dims2()?;
    let head_dim = d / num_heads;
    let split = |t: Tensor| -> Result<Tensor> {
        Ok(t.reshape((tokens, num_heads, head_dim))?
            .transpose(0, 1)?
            .contiguous()?)
    };
    let q = split(linear(x, block.q_weight.tensor(), Some(block.q_bias.tensor()))?)?;
    let k = split(linear(x, block.k_weight.tensor(), Some(block.k_bias.tensor()))?)?;
    let v = split(linear(x, block.v_weight.tensor(), Some(block.v_bias.tensor()))?)?;
    let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (head_dim as f64).sqrt())?;
    let attn = softmax(&scores)?;
    let mixed = attn
        .matmul(&v)?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((tokens, d))?;
    linear(&mixed, block.out_weight.tensor(), Some(block.out_bias.tensor()))
}

fn encoder_block(x: &Tensor, block: &EncoderBlockWeights, num_heads: usize) -> Result<Tensor> {
    let h = layer_norm(
        x,
        block.ln1_scale.tensor(),
        block.ln1_bias.tensor(),
        LAYER_NORM_EPS,
    )?;
    let x = (x + attention(&h, block, num_heads)?)?;
    let h = layer_norm(
        &x,
        block.ln2_scale.tensor(),
        block.ln2_bias.tensor(),
        LAYER_NORM_EPS,
    )?;
    let h = gelu(&linear(&h, block.mlp_w1.tensor(), Some(block.mlp_b1.tensor()))?)?;
    let h = linear(&h, block.mlp_w2.tensor(), Some(block.mlp_b2.tensor()))?;
    Ok((x + h)?)
}

/// Runs the miniature visual encoder and also returns every block's token activations.
pub fn encode_image_traced(
    image: &Image,
    bundle: &ClipWeightBundle,
) -> Result<(ClipImageOutputs, EncoderTrace)> {
    let enc = &bundle.mini_encoder;
    let patches = patchify(image, bundle.patch_size)?;
    let embedded = patches.matmul(enc.patch_embed.tensor())?;
    let cls = enc.class_embedding.tensor().unsqueeze(0)?;
    let mut x = Tensor::cat(&[&cls, &embedded], 0)?;
    let mut block_outputs = Vec::with_capacity(enc.blocks.len());
    for block in &enc.blocks {
        x = encoder_block(&x, block, bundle.num_heads)?;
        block_outputs.push(x.clone());
    }
    let x = layer_norm(
        &x,
        enc.ln_post_scale.tensor(),
        enc.ln_post_bias.tensor(),
        LAYER_NORM_EPS,
    )?;
    let projected = bundle.project(&x)?;
    let tokens = projected.dim(0)?;
    let outputs = ClipImageOutputs {
        cls_token: projected.get(0)?,
        patch_tokens: projected.narrow(0, 1, tokens - 1)?,
        grid_height: image.height / bundle.patch_size,
        grid_width: image.width / bundle.patch_size,
    };
    Ok((outputs, EncoderTrace { block_outputs }))
}

/// Encodes an image into its projected CLS token and per-patch tokens.
pub fn encode_image(image: &Image, bundle: &ClipWeightBundle) -> Result<ClipImageOutputs> {
    encode_image_traced(image, bundle).map(|(out, _)| out)
}

/// Rows of the text-embedding matrix for `names`, in the requested order.
pub fn embed_class_names<S: AsRef<str>>(names: &[S], bundle: &ClipWeightBundle) -> Result<Tensor> {
    let indices = names
        .iter()
        .map(|n| bundle.class_index(n.as_ref()).map(|i| i as u32))
        .collect::<Result<Vec<_>>>()?;
    select_rows(bundle.text_embeddings.tensor(), &indices)
}

/// `(len(indices), d)` rows gathered from a `(N, d)` matrix; empty selections give `(0, d)`.
pub fn select_rows(matrix: &Tensor, indices: &[u32]) -> Result<Tensor> {
    let d = matrix.dim(D::Minus1)?;
    if indices.is_empty() {
        return crate::nn::zeros(&[0, d]);
    }
    let idx = Tensor::new(indices, matrix.device())?;
    Ok(matrix.index_select(&idx, 0)?)
}
