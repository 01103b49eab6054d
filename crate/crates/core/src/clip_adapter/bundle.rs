//! Directory format: `manifest.json` plus one little-endian f32 file per tensor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ClipWeightBundle, EncoderBlockWeights, FrozenTensor, MiniEncoderWeights, VEncoderWeights,
    VisualProjection,
};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT: &str = "chimera-weight-bundle/1";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// Hex SHA-256 of the raw file bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub d_vis: usize,
    pub d_emb: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub encoder_blocks: usize,
    pub vencoder_blocks: usize,
    pub class_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bundle` into `dir`, creating it if needed. Output is byte-deterministic.
pub fn save_weight_bundle(bundle: &ClipWeightBundle, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, tensor) in bundle.named_tensors() {
        let bytes = tensor.to_le_bytes();
        let file = format!("{name}.f32");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: tensor.shape().to_vec(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        d_vis: bundle.d_vis,
        d_emb: bundle.d_emb,
        patch_size: bundle.patch_size,
        num_heads: bundle.num_heads,
        encoder_blocks: bundle.mini_encoder.blocks.len(),
        vencoder_blocks: bundle.vencoder.len(),
        class_names: bundle.class_names.clone(),
        tensors: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads and validates a bundle directory.
pub fn load_weight_bundle(dir: &Path) -> Result<ClipWeightBundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "unsupported bundle format `{}`",
            manifest.format
        )));
    }

    let mut loaded: HashMap<String, FrozenTensor> = HashMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::InvalidArgument(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let file = dir.join(&entry.file);
        let bytes = match fs::read(&file) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingTensor(entry.name.clone()))
            }
            Err(e) => return Err(Error::io(&file, e)),
        };
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum(entry.name.clone()));
        }
        let expected_len: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected_len {
            return Err(Error::TensorShape {
                name: entry.name.clone(),
                expected: entry.shape.clone(),
                found: vec![bytes.len() / 4],
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.insert(entry.name.clone(), FrozenTensor::new(entry.shape.clone(), data)?);
    }

    let d = manifest.d_vis;
    let mut take = |name: String, expected: Vec<usize>| -> Result<FrozenTensor> {
        let t = loaded.remove(&name).ok_or(Error::MissingTensor(name.clone()))?;
        if t.shape() != expected.as_slice() {
            return Err(Error::TensorShape {
                name,
                expected,
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    };

    let p = manifest.patch_size;
    let patch_embed = take("mini.patch_embed".into(), vec![3 * p * p, d])?;
    let class_embedding = take("mini.class_embedding".into(), vec![d])?;
    let mut blocks = Vec::with_capacity(manifest.encoder_blocks);
    for i in 0..manifest.encoder_blocks {
        blocks.push(EncoderBlockWeights::from_fields(|f| {
            take(
                format!("mini.blocks.{i}.{f}"),
                EncoderBlockWeights::expected_shape(f, d),
            )
        })?);
    }
    let ln_post_scale = take("mini.ln_post.scale".into(), vec![d])?;
    let ln_post_bias = take("mini.ln_post.bias".into(), vec![d])?;
    let mut vencoder = Vec::with_capacity(manifest.vencoder_blocks);
    for i in 0..manifest.vencoder_blocks {
        vencoder.push(VEncoderWeights::from_fields(|f| {
            take(
                format!("vencoder.{i}.{f}"),
                VEncoderWeights::expected_shape(f, d),
            )
        })?);
    }
    let visual_projection = VisualProjection {
        weight: take("visual_projection.weight".into(), vec![d, manifest.d_emb])?,
        bias: take("visual_projection.bias".into(), vec![manifest.d_emb])?,
    };
    let text_embeddings = take(
        "text_embeddings".into(),
        vec![manifest.class_names.len(), manifest.d_emb],
    )?;
    if let Some(extra) = loaded.keys().min() {
        return Err(Error::InvalidArgument(format!("unexpected tensor `{extra}` in bundle")));
    }
    check_unit_rows(&text_embeddings)?;

    Ok(ClipWeightBundle {
        d_vis: d,
        d_emb: manifest.d_emb,
        patch_size: p,
        num_heads: manifest.num_heads,
        class_names: manifest.class_names,
        vencoder,
        visual_projection,
        text_embeddings,
        mini_encoder: MiniEncoderWeights {
            patch_embed,
            class_embedding,
            blocks,
            ln_post_scale,
            ln_post_bias,
        },
    })
}

pub(super) fn check_unit_rows(t: &FrozenTensor) -> Result<()> {
    let cols = t.shape()[1];
    for (i, row) in t.data().chunks(cols.max(1)).enumerate() {
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "text embedding row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}
