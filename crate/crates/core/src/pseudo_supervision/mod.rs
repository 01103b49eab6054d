//! Pseudo supervision: masks that expose latent (unannotated) regions, per-class
//! prototypes over those masks, and the semantic alignment KL loss.

pub mod kmeans;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, tensor_from, to_vec};
use crate::raster::{LabelMap, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Unseen classes are unknown during training.
    Inductive,
    /// Unseen class embeddings are available to the training classifier.
    Transductive,
}

/// Partition of the global class IDs `0..N` into seen and unseen sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZSSplit {
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
    pub names: Vec<String>,
    pub mode: SplitMode,
}

impl ZSSplit {
    pub fn new(
        seen_ids: Vec<usize>,
        unseen_ids: Vec<usize>,
        names: Vec<String>,
        mode: SplitMode,
    ) -> Result<Self> {
        let split = Self {
            seen_ids,
            unseen_ids,
            names,
            mode,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if n >= IGNORE_LABEL as usize {
            return Err(Error::InvalidArgument(format!("{n} classes exceed the label range")));
        }
        let mut seen = vec![false; n];
        for &id in self.seen_ids.iter().chain(&self.unseen_ids) {
            if id >= n || seen[id] {
                return Err(Error::InvalidArgument(format!(
                    "class id {id} is out of range or listed twice"
                )));
            }
            seen[id] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("seen and unseen ids must cover every class".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn num_seen(&self) -> usize {
        self.seen_ids.len()
    }

    pub fn is_unseen(&self, id: usize) -> bool {
        self.unseen_ids.contains(&id)
    }

    /// Position of a global class ID among the seen classes.
    pub fn seen_index(&self, id: usize) -> Option<usize> {
        self.seen_ids.iter().position(|&s| s == id)
    }

    /// Maps a full ground-truth map to training labels: seen classes become their
    /// seen index, unseen classes and unknown values become ignore.
    pub fn training_labels(&self, gt: &LabelMap) -> LabelMap {
        let labels = gt
            .labels
            .iter()
            .map(|&l| match self.seen_index(l as usize) {
                Some(i) if l != IGNORE_LABEL => i as u8,
                _ => IGNORE_LABEL,
            })
            .collect();
        LabelMap {
            height: gt.height,
            width: gt.width,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoMaskConfig {
    pub k_clusters: usize,
    pub iterations: usize,
    /// Minimum cosine similarity for relabeling a cluster as a seen class.
    pub theta: f64,
    /// Clusters smaller than this many pixels become ignore.
    pub min_area: usize,
    pub seed: u64,
}

impl Default for PseudoMaskConfig {
    fn default() -> Self {
        Self {
            k_clusters: 8,
            iterations: 50,
            theta: 0.7,
            min_area: 4,
            seed: 0,
        }
    }
}

/// Ground-truth seen labels plus clustered latent regions.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub labels: LabelMap,
    pub n_seen: usize,
    /// Number of latent IDs, which occupy `n_seen .. n_seen + o_u`.
    pub o_u: usize,
    /// Token-space centroid of each latent region, indexed by `id - n_seen`.
    pub latent_centroids: Vec<Vec<f64>>,
}

impl PseudoMask {
    pub fn check_invariants(&self) -> Result<()> {
        let limit = self.n_seen + self.o_u;
        if let Some(&bad) = self
            .labels
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= limit)
        {
            return Err(Error::InvalidArgument(format!(
                "pseudo label {bad} exceeds {limit} classes"
            )));
        }
        Ok(())
    }

    /// Replaces latent IDs with the unseen class whose embedding best matches the
    /// region centroid; the result indexes `cat(A_s, A_u)`.
    pub fn assign_latents_to_unseen(&self, unseen_embeddings: &[Vec<f64>]) -> Result<LabelMap> {
        if self.o_u > 0 && unseen_embeddings.is_empty() {
            return Err(Error::InvalidArgument("no unseen embeddings to assign latents to".into()));
        }
        let targets: Vec<u8> = self
            .latent_centroids
            .iter()
            .map(|c| (self.n_seen + best_cosine(c, unseen_embeddings).0) as u8)
            .collect();
        let labels = self
            .labels
            .labels
            .iter()
            .map(|&l| {
                if l != IGNORE_LABEL && l as usize >= self.n_seen {
                    targets[l as usize - self.n_seen]
                } else {
                    l
                }
            })
            .collect();
        LabelMap::new(self.labels.height, self.labels.width, labels)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `(index, similarity)` of the row with the highest cosine similarity; ties to the lower index.
fn best_cosine(v: &[f64], rows: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in rows.iter().enumerate() {
        let s = cosine(v, r);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Splits a `(rows, cols)` tensor into row vectors.
pub fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (_, cols) = t.dims2()?;
    Ok(to_vec(t)?.chunks(cols.max(1)).map(|r| r.to_vec()).collect())
}

/// Builds a pseudo mask at label resolution.
///
/// Pixels carrying a ground-truth seen label keep it. The remaining pixels are
/// clustered on their (nearest-neighbour upsampled) patch tokens. A cluster whose
/// centroid matches a seen text embedding with cosine above `theta` takes that
/// seen label; the others become latent IDs ordered by decreasing size. Clusters
/// below `min_area` pixels become ignore.
pub fn generate_pseudo_mask(
    patch_tokens: &Tensor,
    grid: (usize, usize),
    gt_seen: &LabelMap,
    a_s: &Tensor,
    cfg: &PseudoMaskConfig,
) -> Result<PseudoMask> {
    if cfg.k_clusters < 1 {
        return Err(Error::InvalidArgument("k_clusters must be at least 1".into()));
    }
    let (gh, gw) = grid;
    let tokens = tensor_rows(patch_tokens)?;
    if tokens.len() != gh * gw || gh == 0 || gw == 0 {
        return Err(Error::Dimension(format!(
            "{} patch tokens do not form a {gh}×{gw} grid",
            tokens.len()
        )));
    }
    let (h, w) = (gt_seen.height, gt_seen.width);
    if h % gh != 0 || w % gw != 0 || h / gh != w / gw {
        return Err(Error::Dimension(format!(
            "{gh}×{gw} token grid does not upsample to {h}×{w} by an integer factor"
        )));
    }
    let factor = h / gh;
    let seen_rows = tensor_rows(a_s)?;
    let n_seen = seen_rows.len();

    let ignored: Vec<usize> = (0..h * w)
        .filter(|&i| gt_seen.labels[i] == IGNORE_LABEL)
        .collect();
    let mut labels = gt_seen.labels.clone();
    if ignored.is_empty() {
        return Ok(PseudoMask {
            labels: gt_seen.clone(),
            n_seen,
            o_u: 0,
            latent_centroids: Vec::new(),
        });
    }
    let points: Vec<Vec<f64>> = ignored
        .iter()
        .map(|&i| {
            let (r, c) = (i / w, i % w);
            tokens[(r / factor) * gw + c / factor].clone()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = kmeans::kmeans_plus_plus(&points, cfg.k_clusters, &mut rng);
    let result = kmeans::lloyd(&points, init, cfg.iterations);
    let k = result.centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in &result.assignments {
        sizes[a] += 1;
    }

    // Decide each cluster's label.
    let mut cluster_label = vec![IGNORE_LABEL; k];
    let mut latent: Vec<usize> = Vec::new();
    for c in 0..k {
        if sizes[c] == 0 || sizes[c] < cfg.min_area {
            continue;
        }
        let (best, sim) = best_cosine(&result.centroids[c], &seen_rows);
        if !seen_rows.is_empty() && sim > cfg.theta {
            cluster_label[c] = best as u8;
        } else {
            latent.push(c);
        }
    }
    latent.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    if n_seen + latent.len() >= IGNORE_LABEL as usize {
        return Err(Error::InvalidArgument("too many latent regions for 8-bit labels".into()));
    }
    let mut latent_centroids = Vec::with_capacity(latent.len());
    for (rank, &c) in latent.iter().enumerate() {
        cluster_label[c] = (n_seen + rank) as u8;
        latent_centroids.push(result.centroids[c].clone());
    }
    for (&pixel, &a) in ignored.iter().zip(&result.assignments) {
        labels[pixel] = cluster_label[a];
    }
    let mask = PseudoMask {
        labels: LabelMap::new(h, w, labels)?,
        n_seen,
        o_u: latent.len(),
        latent_centroids,
    };
    mask.check_invariants()?;
    Ok(mask)
}

/// Masked means of dense features, one per label present in the mask.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// Class IDs in ascending order.
    pub ids: Vec<u8>,
    /// `(O, d_emb)`, row `i` belongs to `ids[i]`.
    pub features: Tensor,
    pub n_seen: usize,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Averages `f_c: (H'·W', d)` over every label region of `mask: H'×W'`.
/// Ignore positions are excluded. Differentiable in `f_c`.
pub fn compute_prototypes(f_c: &Tensor, mask: &LabelMap, n_seen: usize) -> Result<PrototypeSet> {
    let (positions, d) = f_c.dims2()?;
    if positions != mask.labels.len() {
        return Err(Error::Dimension(format!(
            "{positions} feature rows do not match a {}×{} mask",
            mask.height, mask.width
        )));
    }
    let mut counts = [0usize; 256];
    for &l in &mask.labels {
        if l != IGNORE_LABEL {
            counts[l as usize] += 1;
        }
    }
    let ids: Vec<u8> = (0..255u8).filter(|&l| counts[l as usize] > 0).collect();
    if ids.is_empty() {
        return Ok(PrototypeSet {
            ids,
            features: crate::nn::zeros(&[0, d])?,
            n_seen,
        });
    }
    let mut weights = vec![0.0; ids.len() * positions];
    for (row, &id) in ids.iter().enumerate() {
        let inv = 1.0 / counts[id as usize] as f64;
        for (p, &l) in mask.labels.iter().enumerate() {
            if l == id {
                weights[row * positions + p] = inv;
            }
        }
    }
    let averaging = tensor_from(weights, &[ids.len(), positions])?;
    Ok(PrototypeSet {
        features: averaging.matmul(f_c)?,
        ids,
        n_seen,
    })
}

/// Seen and latent prototypes as `(ids, features)` pairs, order preserved.
#[allow(clippy::type_complexity)]
pub fn split_prototypes(p: &PrototypeSet) -> Result<((Vec<u8>, Tensor), (Vec<u8>, Tensor))> {
    let cut = p.ids.iter().take_while(|&&id| (id as usize) < p.n_seen).count();
    let seen = p.features.narrow(0, 0, cut)?;
    let latent = p.features.narrow(0, cut, p.ids.len() - cut)?;
    Ok((
        (p.ids[..cut].to_vec(), seen),
        (p.ids[cut..].to_vec(), latent),
    ))
}

/// `KL(softmax(F_s·c_g/τ_f) ‖ softmax(A_s·c_g/τ_c))` over the seen classes present in an image.
pub fn sam_loss(
    f_l_s: &Tensor,
    a_s_present: &Tensor,
    c_g: &Tensor,
    tau_f: f64,
    tau_c: f64,
) -> Result<Tensor> {
    if !(tau_f > 0.0) || !(tau_c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperatures must be positive (tau_f={tau_f}, tau_c={tau_c})"
        )));
    }
    let (o, d) = f_l_s.dims2()?;
    let (oa, da) = a_s_present.dims2()?;
    if o != oa || d != da || c_g.dims1()? != d {
        return Err(Error::Dimension(format!(
            "prototypes {o}×{d}, embeddings {oa}×{da} and CLS {} disagree",
            c_g.dims1()?
        )));
    }
    if o == 0 {
        return Err(Error::InvalidArgument("no seen prototypes".into()));
    }
    let c = c_g.unsqueeze(1)?;
    let log_p = log_softmax(&(f_l_s.matmul(&c)?.t()? / tau_f)?)?;
    let log_q = log_softmax(&(a_s_present.matmul(&c)?.t()? / tau_c)?)?;
    let kl = (log_p.exp()? * (&log_p - &log_q)?)?.sum_all()?;
    Ok(kl)
}

#[cfg(test)]
mod tests;
