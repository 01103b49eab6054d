//! Selective global distillation: rank dense features against the image CLS
//! token, pick the top K under Gumbel perturbation, aggregate them into one
//! global feature and align it with the CLS token through batch InfoNCE.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip_adapter::select_rows;
use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    Decrease,
    Increase,
    None,
}

impl std::str::FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decrease" => Ok(DecayMode::Decrease),
            "increase" => Ok(DecayMode::Increase),
            "none" => Ok(DecayMode::None),
            other => Err(Error::InvalidArgument(format!("unknown decay mode `{other}`"))),
        }
    }
}

/// How the number of selected features evolves with the iteration count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub k0: usize,
    /// Change in K per iteration.
    pub rate: f64,
    pub k_min: usize,
    pub mode: DecayMode,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        Self {
            k0: 9000,
            rate: 0.1,
            k_min: 1,
            mode: DecayMode::Decrease,
        }
    }
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 || self.k0 < self.k_min {
            return Err(Error::InvalidArgument(format!(
                "decay schedule needs k0 ≥ k_min ≥ 1 (k0={}, k_min={})",
                self.k0, self.k_min
            )));
        }
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(Error::InvalidArgument(format!("decay rate {} must be ≥ 0", self.rate)));
        }
        Ok(())
    }
}

/// Number of features selected at `iteration` for a map with `capacity` positions.
///
/// Rounds half to even, then clamps into `[k_min, min(k0, capacity)]`
/// (`[k_min, capacity]` when increasing).
pub fn decayed_k(iteration: u64, sched: &DecaySchedule, capacity: usize) -> usize {
    let t = iteration as f64;
    let k0 = sched.k0 as f64;
    let (raw, upper) = match sched.mode {
        DecayMode::Decrease => ((k0 - sched.rate * t).round_ties_even(), sched.k0.min(capacity)),
        DecayMode::Increase => ((k0 + sched.rate * t).round_ties_even(), capacity),
        DecayMode::None => (k0, sched.k0.min(capacity)),
    };
    let lower = sched.k_min.min(upper).max(1);
    let raw = if raw < 0.0 { 0 } else { raw as usize };
    raw.clamp(lower, upper.max(lower))
}

/// Scaled dot-product similarity of every row of `f_c: (P, d)` with `c_g: (d)`.
pub fn similarity_scores(f_c: &Tensor, c_g: &Tensor) -> Result<Tensor> {
    let (_, d) = f_c.dims2()?;
    let dc = c_g.dims1()?;
    if d != dc {
        return Err(Error::Dimension(format!(
            "feature width {d} does not match CLS width {dc}"
        )));
    }
    let s = f_c.matmul(&c_g.unsqueeze(1)?)?.squeeze(1)?;
    Ok((s / (d as f64).sqrt())?)
}

fn check_selection(n: usize, k: usize, tau: f64) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {n} positions"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// Draws one standard Gumbel variate per score: `-ln(-ln ε)`, `ε ~ U(0, 1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // `random` yields [0, 1); reject the endpoint that would give an infinite draw.
            let mut eps: f64 = rng.random();
            while eps <= 0.0 {
                eps = rng.random();
            }
            -(-eps.ln()).ln()
        })
        .collect()
}

/// Sampling weights `softmax((s + g) / τ)` for given scores and Gumbel draws.
pub fn gumbel_weights(scores: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = scores.iter().zip(noise).map(|(s, g)| (s + g) / tau).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Positions of the `k` largest values, ties broken by lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Selects `k` positions. With `noise`, positions are ranked by the Gumbel-perturbed
/// sampling weights; softmax preserves order, so ranking `s + g` directly is equivalent.
/// Without noise this is a deterministic top-k of the scores.
pub fn gumbel_topk<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    tau: f64,
    rng: &mut R,
    noise: bool,
) -> Result<Vec<usize>> {
    check_selection(scores.len(), k, tau)?;
    if !noise {
        return Ok(top_k_indices(scores, k));
    }
    let g = gumbel_noise(rng, scores.len());
    let perturbed: Vec<f64> = scores.iter().zip(&g).map(|(s, g)| s + g).collect();
    Ok(top_k_indices(&perturbed, k))
}

/// Re-weights the selected features by their softmax similarity to the CLS token
/// and sums them. Returns `(w', f_g)`.
pub fn aggregate_global(f_k: &Tensor, c_g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (k, _) = f_k.dims2()?;
    if k == 0 {
        return Err(Error::InvalidArgument("cannot aggregate an empty selection".into()));
    }
    let logits = similarity_scores(f_k, c_g)?;
    let w = softmax(&logits.unsqueeze(0)?)?;
    let f_g = w.matmul(f_k)?.squeeze(0)?;
    Ok((w.squeeze(0)?, f_g))
}

/// The selected positions, their features and aggregation weights for one image.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    /// `(K, d_emb)`
    pub f_k: Tensor,
    /// `(K)`, a probability vector.
    pub weights: Tensor,
}

/// Scores, selects and aggregates for one image. Selection itself is not
/// differentiated; gradients flow through the selected features and weights.
pub fn select_global_feature<R: Rng + ?Sized>(
    f_c: &Tensor,
    c_g: &Tensor,
    k: usize,
    tau: f64,
    rng: &mut R,
    noise: bool,
) -> Result<(SelectionResult, Tensor)> {
    let scores = crate::nn::to_vec(&similarity_scores(&f_c.detach(), c_g)?)?;
    let indices = gumbel_topk(&scores, k, tau, rng, noise)?;
    let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
    let f_k = select_rows(f_c, &idx)?;
    let (weights, f_g) = aggregate_global(&f_k, c_g)?;
    Ok((
        SelectionResult {
            indices,
            f_k,
            weights,
        },
        f_g,
    ))
}

/// Batch InfoNCE between global features `(B, d)` and CLS tokens `(B, d)`:
/// the mean over `i` of `-log softmax_j(⟨f_g_i, c_g_j⟩ / τ)[i]`.
pub fn sgd_loss(f_g: &Tensor, c_g: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let (b, d) = f_g.dims2()?;
    let (bc, dc) = c_g.dims2()?;
    if b != bc || d != dc {
        return Err(Error::Dimension(format!(
            "global features {b}×{d} do not match CLS tokens {bc}×{dc}"
        )));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let logits = (f_g.matmul(&c_g.t()?)? / tau)?;
    let log_probs = log_softmax(&logits)?;
    let diag = Tensor::arange(0u32, b as u32, f_g.device())?.unsqueeze(1)?;
    let positives = log_probs.gather(&diag, D::Minus1)?;
    Ok(positives.mean_all()?.neg()?)
}
