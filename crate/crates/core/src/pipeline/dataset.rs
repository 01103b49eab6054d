//! On-disk datasets: a `manifest.json`, RGB PNG images and single-channel PNG
//! label maps, plus a generator of synthetic scenes for offline experiments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_supervision::{SplitMode, ZSSplit};
use crate::raster::{Image, LabelMap, IGNORE_LABEL};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "chimera-dataset/1";

/// Side of the square blocks toy scenes are tiled with. Region boundaries fall on
/// multiples of this, so they align with any patch size or stride dividing it.
pub const TOY_BLOCK: usize = 16;

/// Names handed out to toy classes, in class-ID order.
pub const TOY_CLASS_NAMES: [&str; 12] = [
    "sky", "grass", "road", "water", "sand", "snow", "brick", "forest", "lava", "marble",
    "rust", "moss",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
    pub entries: Vec<DatasetEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, mode: SplitMode) -> Result<ZSSplit> {
        ZSSplit::new(
            self.seen_ids.clone(),
            self.unseen_ids.clone(),
            self.classes.clone(),
            mode,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported dataset format `{}`",
                manifest.format
            )));
        }
        manifest.root = dir.to_path_buf();
        manifest.split(SplitMode::Inductive)?;
        for e in &manifest.entries {
            for f in [&e.image, &e.label] {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file missing"),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads every image and its full ground-truth label map.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        let n = self.classes.len();
        self.entries
            .iter()
            .map(|e| {
                let image = Image::load_png(&self.root.join(&e.image))?;
                let labels = LabelMap::load_png(&self.root.join(&e.label))?;
                if (image.height, image.width) != (labels.height, labels.width) {
                    return Err(Error::Dimension(format!(
                        "{} and {} differ in size",
                        e.image, e.label
                    )));
                }
                if let Some(&bad) = labels
                    .labels
                    .iter()
                    .find(|&&l| l != IGNORE_LABEL && l as usize >= n)
                {
                    return Err(Error::InvalidArgument(format!(
                        "{} contains label {bad} but only {n} classes exist",
                        e.label
                    )));
                }
                Ok(Sample {
                    name: e.image.clone(),
                    image,
                    labels,
                })
            })
            .collect()
    }
}

/// An image with its full (all-class) annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub labels: LabelMap,
}

/// Base colour of each toy class, spread around the hue circle.
fn class_color(class: usize, n: usize) -> [f64; 3] {
    let hue = class as f64 / n as f64;
    let value = if class % 2 == 0 { 0.85 } else { 0.6 };
    let sector = hue * 6.0;
    let f = sector.fract();
    let (p, q, t) = (0.2 * value, value * (1.0 - 0.8 * f), value * (0.2 + 0.8 * f));
    match sector as usize % 6 {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    }
}

/// Class-specific texture in `[-1, 1]`: stripes, checkerboards or diagonal waves.
fn texture(class: usize, r: usize, c: usize) -> f64 {
    let period = 2 + class % 3;
    match class % 3 {
        0 => {
            if (r / period) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        1 => {
            if ((r / period) + (c / period)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => ((r + c) as f64 * std::f64::consts::PI / period as f64).sin(),
    }
}

/// Writes a deterministic synthetic dataset: square scenes tiled with
/// [`TOY_BLOCK`]-sized blocks, each showing one class's colour and texture, with
/// the occasional unlabeled grey block. Classes `0..n_seen` are seen.
pub fn make_toy_dataset(
    seed: u64,
    n_images: usize,
    image_size: usize,
    n_seen: usize,
    n_unseen: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let n = n_seen + n_unseen;
    if n_images == 0 || n_seen == 0 || n > TOY_CLASS_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "need ≥1 image, ≥1 seen class and at most {} classes",
            TOY_CLASS_NAMES.len()
        )));
    }
    if image_size == 0 || image_size % TOY_BLOCK != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} must be a positive multiple of {TOY_BLOCK}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = image_size / TOY_BLOCK;
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        // Each scene draws from a few classes so that regions are large and contiguous.
        let palette: Vec<usize> = (0..3).map(|_| rng.random_range(0..n)).collect();
        let block_class: Vec<Option<usize>> = (0..blocks * blocks)
            .map(|_| {
                if rng.random_bool(0.08) {
                    None
                } else {
                    Some(palette[rng.random_range(0..palette.len())])
                }
            })
            .collect();
        let mut data = Vec::with_capacity(image_size * image_size * 3);
        let mut labels = Vec::with_capacity(image_size * image_size);
        for r in 0..image_size {
            for c in 0..image_size {
                let block = (r / TOY_BLOCK) * blocks + c / TOY_BLOCK;
                let jitter = (rng.random::<f64>() - 0.5) * 0.06;
                match block_class[block] {
                    Some(class) => {
                        let base = class_color(class, n);
                        let t = 0.12 * texture(class, r, c);
                        data.extend(base.iter().map(|v| (v + t + jitter).clamp(0.0, 1.0)));
                        labels.push(class as u8);
                    }
                    None => {
                        data.extend([0.5 + jitter; 3]);
                        labels.push(IGNORE_LABEL);
                    }
                }
            }
        }
        let image_name = format!("image_{i:04}.png");
        let label_name = format!("label_{i:04}.png");
        Image::new(image_size, image_size, data)?.save_png(&out_dir.join(&image_name))?;
        LabelMap::new(image_size, image_size, labels)?.save_png(&out_dir.join(&label_name))?;
        entries.push(DatasetEntry {
            image: image_name,
            label: label_name,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        image_size,
        classes: TOY_CLASS_NAMES[..n].iter().map(|s| s.to_string()).collect(),
        seen_ids: (0..n_seen).collect(),
        unseen_ids: (n_seen..n).collect(),
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
