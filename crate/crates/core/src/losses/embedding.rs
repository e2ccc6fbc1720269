//! Instance-association objectives: pair-wise against reference-frame
//! embeddings, or global against one learnable proxy row per identity.

use serde::{Deserialize, Serialize};

use crate::netcore::sigmoid;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Keys carry their identity; references are the already-identified
/// instances of the other frame (pair-wise variants only).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingBatch {
    pub keys: Vec<(Vec<f64>, usize)>,
    pub references: Vec<(Vec<f64>, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrads {
    pub keys: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGrads {
    pub keys: Vec<Vec<f64>>,
    /// Same layout as the proxy matrix.
    pub proxies: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

/// `[p(ref_1), …, p(ref_N), p(new)]` where the "new identity" option has a
/// constant logit of zero.
pub fn pairwise_assign_prob<R: AsRef<[f64]>>(key: &[f64], refs: &[R]) -> Vec<f64> {
    let mut logits: Vec<f64> = refs.iter().map(|r| dot(key, r.as_ref())).collect();
    logits.push(0.0);
    softmax(&logits)
}

fn pairwise_label(batch: &EmbeddingBatch, identity: usize) -> usize {
    batch
        .references
        .iter()
        .position(|(_, id)| *id == identity)
        .unwrap_or(batch.references.len())
}

/// Mean over keys of `−log p(true label)`.
pub fn pairwise_ce_loss(batch: &EmbeddingBatch) -> f64 {
    pairwise_ce_loss_grad(batch).0
}

pub fn pairwise_ce_loss_grad(batch: &EmbeddingBatch) -> (f64, EmbeddingGrads) {
    let dim = batch.keys.first().map_or(0, |k| k.0.len());
    let mut grads = EmbeddingGrads {
        keys: vec![vec![0.0; dim]; batch.keys.len()],
        references: batch.references.iter().map(|(r, _)| vec![0.0; r.len()]).collect(),
    };
    if batch.keys.is_empty() {
        return (0.0, grads);
    }
    let n_keys = batch.keys.len() as f64;
    let mut total = 0.0;
    for (ki, (key, identity)) in batch.keys.iter().enumerate() {
        let mut logits: Vec<f64> = batch.references.iter().map(|(r, _)| dot(key, r)).collect();
        logits.push(0.0);
        let label = pairwise_label(batch, *identity);
        total -= log_softmax_at(&logits, label);
        let p = softmax(&logits);
        for (ri, (r, _)) in batch.references.iter().enumerate() {
            let dz = (p[ri] - (ri == label) as u8 as f64) / n_keys;
            for d in 0..key.len() {
                grads.keys[ki][d] += dz * r[d];
                grads.references[ri][d] += dz * key[d];
            }
        }
    }
    (total / n_keys, grads)
}

/// `−α_t (1−p)^γ log p` and its derivative with respect to the logit `z`,
/// where `p = σ(z)` for a positive and `1 − σ(z)` for a negative.
pub fn focal_term(z: f64, positive: bool, fp: &FocalParams) -> (f64, f64) {
    let signed = if positive { z } else { -z };
    let p = sigmoid(signed);
    // log σ(x) = −softplus(−x)
    let log_p = -softplus(-signed);
    let alpha_t = if positive { fp.alpha } else { 1.0 - fp.alpha };
    let one_minus = sigmoid(-signed);
    let modulator = if fp.gamma == 0.0 { 1.0 } else { one_minus.powf(fp.gamma) };
    let loss = -alpha_t * modulator * log_p;
    // d/dx of −α(1−p)^γ log p with p = σ(x): α(1−p)^γ (γ p log p − (1−p))
    let d_signed = alpha_t * modulator * (fp.gamma * p * log_p - one_minus);
    let dz = if positive { d_signed } else { -d_signed };
    (loss, dz)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss over the references: each reference is a binary
/// target that is positive when it carries the key's identity. Mean over keys.
pub fn pairwise_focal_loss_grad(batch: &EmbeddingBatch, fp: &FocalParams) -> (f64, EmbeddingGrads) {
    let dim = batch.keys.first().map_or(0, |k| k.0.len());
    let mut grads = EmbeddingGrads {
        keys: vec![vec![0.0; dim]; batch.keys.len()],
        references: batch.references.iter().map(|(r, _)| vec![0.0; r.len()]).collect(),
    };
    if batch.keys.is_empty() {
        return (0.0, grads);
    }
    let n_keys = batch.keys.len() as f64;
    let mut total = 0.0;
    for (ki, (key, identity)) in batch.keys.iter().enumerate() {
        for (ri, (r, rid)) in batch.references.iter().enumerate() {
            let (l, dz) = focal_term(dot(key, r), rid == identity, fp);
            total += l;
            let dz = dz / n_keys;
            for d in 0..key.len() {
                grads.keys[ki][d] += dz * r[d];
                grads.references[ri][d] += dz * key[d];
            }
        }
    }
    (total / n_keys, grads)
}

fn check_proxies(proxies: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || proxies.len() % dim != 0 || proxies.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "proxy matrix of {} values does not fit embedding dim {dim}",
            proxies.len()
        )));
    }
    Ok(proxies.len() / dim)
}

fn check_label(label: usize, rows: usize) -> Result<()> {
    if label >= rows {
        return Err(Error::InvalidArgument(format!(
            "identity {label} out of range for {rows} proxies"
        )));
    }
    Ok(())
}

/// Softmax over `e·w_j` for every proxy row `w_j` of the row-major `M×D` matrix.
pub fn global_assign_prob(key: &[f64], proxies: &[f64]) -> Result<Vec<f64>> {
    check_proxies(proxies, key.len())?;
    let logits: Vec<f64> = proxies.chunks(key.len()).map(|w| dot(key, w)).collect();
    Ok(softmax(&logits))
}

/// Batch mean of `−log p(label)` under [`global_assign_prob`].
pub fn global_ce_loss(keys: &[(Vec<f64>, usize)], proxies: &[f64]) -> Result<f64> {
    Ok(global_ce_loss_grad(keys, proxies)?.0)
}

pub fn global_ce_loss_grad(keys: &[(Vec<f64>, usize)], proxies: &[f64]) -> Result<(f64, GlobalGrads)> {
    let mut grads = GlobalGrads {
        keys: keys.iter().map(|(k, _)| vec![0.0; k.len()]).collect(),
        proxies: vec![0.0; proxies.len()],
    };
    let Some((first, _)) = keys.first() else {
        return Ok((0.0, grads));
    };
    let dim = first.len();
    let rows = check_proxies(proxies, dim)?;
    let n = keys.len() as f64;
    let mut total = 0.0;
    for (ki, (key, label)) in keys.iter().enumerate() {
        check_label(*label, rows)?;
        let logits: Vec<f64> = proxies.chunks(dim).map(|w| dot(key, w)).collect();
        total -= log_softmax_at(&logits, *label);
        let p = softmax(&logits);
        for (j, w) in proxies.chunks(dim).enumerate() {
            let dz = (p[j] - (j == *label) as u8 as f64) / n;
            for d in 0..dim {
                grads.keys[ki][d] += dz * w[d];
                grads.proxies[j * dim + d] += dz * key[d];
            }
        }
    }
    Ok((total / n, grads))
}

/// Sigmoid focal loss against every proxy row: the key's own identity is the
/// positive class, all others negatives. Summed over classes and normalized
/// by the number of positives (one per key).
pub fn global_focal_id_loss(keys: &[(Vec<f64>, usize)], proxies: &[f64], fp: &FocalParams) -> Result<f64> {
    Ok(global_focal_id_loss_grad(keys, proxies, fp)?.0)
}

pub fn global_focal_id_loss_grad(
    keys: &[(Vec<f64>, usize)],
    proxies: &[f64],
    fp: &FocalParams,
) -> Result<(f64, GlobalGrads)> {
    let mut grads = GlobalGrads {
        keys: keys.iter().map(|(k, _)| vec![0.0; k.len()]).collect(),
        proxies: vec![0.0; proxies.len()],
    };
    let Some((first, _)) = keys.first() else {
        return Ok((0.0, grads));
    };
    let dim = first.len();
    let rows = check_proxies(proxies, dim)?;
    let n = keys.len() as f64;
    let mut total = 0.0;
    for (ki, (key, label)) in keys.iter().enumerate() {
        check_label(*label, rows)?;
        for (j, w) in proxies.chunks(dim).enumerate() {
            let (l, dz) = focal_term(dot(key, w), j == *label, fp);
            total += l;
            let dz = dz / n;
            for d in 0..dim {
                grads.keys[ki][d] += dz * w[d];
                grads.proxies[j * dim + d] += dz * key[d];
            }
        }
    }
    Ok((total / n, grads))
}
