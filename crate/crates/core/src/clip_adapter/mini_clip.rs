//! Deterministic synthesis of a small CLIP-like weight bundle for offline use.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::bundle::check_unit_rows;
use super::{
    ClipWeightBundle, EncoderBlockWeights, FrozenTensor, MiniEncoderWeights, VEncoderWeights,
    VisualProjection,
};
use crate::error::{Error, Result};

pub const ENCODER_BLOCKS: usize = 2;
pub const VENCODER_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MiniClipSpec {
    pub seed: u64,
    pub d_vis: usize,
    pub d_emb: usize,
    pub patch_size: usize,
    pub class_names: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// A `rows × cols` matrix with orthonormal columns (or rows, when wide).
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let q = gaussian(rng, r, c).qr().q();
    if tall {
        q
    } else {
        q.transpose()
    }
}

fn frozen_matrix(m: &DMatrix<f64>) -> Result<FrozenTensor> {
    // nalgebra is column-major; bundle tensors are row-major.
    let values: Vec<f64> = m.transpose().iter().copied().collect();
    FrozenTensor::from_f64(vec![m.nrows(), m.ncols()], &values)
}

fn filled(len: usize, value: f64) -> Result<FrozenTensor> {
    FrozenTensor::from_f64(vec![len], &vec![value; len])
}

fn to_matrix(t: &FrozenTensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_iterator(r, c, t.data().iter().map(|&v| v as f64))
}

fn to_row(t: &FrozenTensor) -> DMatrix<f64> {
    DMatrix::from_row_iterator(1, t.data().len(), t.data().iter().map(|&v| v as f64))
}

fn encoder_block(rng: &mut ChaCha8Rng, d: usize) -> Result<EncoderBlockWeights> {
    Ok(EncoderBlockWeights {
        ln1_scale: filled(d, 1.0)?,
        ln1_bias: filled(d, 0.0)?,
        q_weight: frozen_matrix(&orthogonal(rng, d, d))?,
        q_bias: filled(d, 0.0)?,
        k_weight: frozen_matrix(&orthogonal(rng, d, d))?,
        k_bias: filled(d, 0.0)?,
        v_weight: frozen_matrix(&orthogonal(rng, d, d))?,
        v_bias: filled(d, 0.0)?,
        out_weight: frozen_matrix(&orthogonal(rng, d, d))?,
        out_bias: filled(d, 0.0)?,
        ln2_scale: filled(d, 1.0)?,
        ln2_bias: filled(d, 0.0)?,
        mlp_w1: frozen_matrix(&orthogonal(rng, d, 4 * d))?,
        mlp_b1: filled(4 * d, 0.0)?,
        mlp_w2: frozen_matrix(&orthogonal(rng, 4 * d, d))?,
        mlp_b2: filled(d, 0.0)?,
    })
}

/// The attention-free branch of an encoder block: the value map is the value
/// projection followed by the output projection.
fn vencoder_from_block(block: &EncoderBlockWeights) -> Result<VEncoderWeights> {
    let v = to_matrix(&block.v_weight);
    let out = to_matrix(&block.out_weight);
    let value_weight = &v * &out;
    let value_bias = to_row(&block.v_bias) * &out + to_row(&block.out_bias);
    Ok(VEncoderWeights {
        ln1_scale: block.ln1_scale.clone(),
        ln1_bias: block.ln1_bias.clone(),
        value_weight: frozen_matrix(&value_weight)?,
        value_bias: FrozenTensor::from_f64(
            vec![value_bias.ncols()],
            value_bias.as_slice(),
        )?,
        ln2_scale: block.ln2_scale.clone(),
        ln2_bias: block.ln2_bias.clone(),
        ffn_w1: block.mlp_w1.clone(),
        ffn_b1: block.mlp_b1.clone(),
        ffn_w2: block.mlp_w2.clone(),
        ffn_b2: block.mlp_b2.clone(),
    })
}

/// Builds a deterministic miniature bundle: orthogonal projections, zero biases,
/// unit layer-norm scales and L2-normalized Gaussian text embeddings.
///
/// The VEncoder stack holds three blocks. The last two are the value+FFN
/// branches of the encoder's two blocks; the first is an extra orthogonal block
/// so that stacks of up to three can be exercised.
pub fn make_mini_clip(spec: &MiniClipSpec) -> Result<ClipWeightBundle> {
    let MiniClipSpec {
        seed,
        d_vis,
        d_emb,
        patch_size,
        ref class_names,
    } = *spec;
    if d_vis < 4 || d_emb < 2 || patch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid mini-CLIP dimensions d_vis={d_vis}, d_emb={d_emb}, patch_size={patch_size}"
        )));
    }
    if class_names.is_empty() {
        return Err(Error::InvalidArgument("at least one class name is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_heads = if d_vis % 4 == 0 { 4 } else { 1 };

    let patch_dim = 3 * patch_size * patch_size;
    let patch_embed = frozen_matrix(&orthogonal(&mut rng, patch_dim, d_vis))?;
    let scale = (d_vis as f64).powf(-0.5);
    let class_embedding: Vec<f64> = (0..d_vis)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    let class_embedding = FrozenTensor::from_f64(vec![d_vis], &class_embedding)?;
    let blocks = (0..ENCODER_BLOCKS)
        .map(|_| encoder_block(&mut rng, d_vis))
        .collect::<Result<Vec<_>>>()?;
    let extra = (ENCODER_BLOCKS..VENCODER_BLOCKS)
        .map(|_| encoder_block(&mut rng, d_vis))
        .collect::<Result<Vec<_>>>()?;
    let projection = frozen_matrix(&orthogonal(&mut rng, d_vis, d_emb))?;

    let mut text = gaussian(&mut rng, class_names.len(), d_emb);
    for mut row in text.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    let text_embeddings = frozen_matrix(&text)?;
    check_unit_rows(&text_embeddings)?;

    let mut vencoder = Vec::with_capacity(VENCODER_BLOCKS);
    for block in extra.iter().chain(&blocks) {
        vencoder.push(vencoder_from_block(block)?);
    }

    Ok(ClipWeightBundle {
        d_vis,
        d_emb,
        patch_size,
        num_heads,
        class_names: class_names.clone(),
        vencoder,
        visual_projection: VisualProjection {
            weight: projection,
            bias: filled(d_emb, 0.0)?,
        },
        text_embeddings,
        mini_encoder: MiniEncoderWeights {
            patch_embed,
            class_embedding,
            blocks,
            ln_post_scale: filled(d_vis, 1.0)?,
            ln_post_bias: filled(d_vis, 0.0)?,
        },
    })
}
