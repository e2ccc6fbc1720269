use crate::{Error, Result};

/// Smoothing added (twice) to numerator and denominator so the loss is
/// defined when both masks are empty.
pub const DICE_EPS: f64 = 1e-6;

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice: prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// `1 − (2·Σ m·m* + 2ε) / (Σ m² + Σ m*² + 2ε)`.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(dice_loss_grad(pred, target)?.0)
}

pub fn dice_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check(pred, target)?;
    let inter: f64 = pred.iter().zip(target).map(|(m, t)| m * t).sum();
    let sq: f64 = pred.iter().map(|m| m * m).sum::<f64>() + target.iter().map(|t| t * t).sum::<f64>();
    let num = 2.0 * inter + 2.0 * DICE_EPS;
    let den = sq + 2.0 * DICE_EPS;
    let loss = 1.0 - num / den;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(m, t)| -(2.0 * t * den - num * 2.0 * m) / (den * den))
        .collect();
    Ok((loss, grad))
}

/// Mean dice over `(prediction, target)` pairs, with per-pair gradients.
/// Returns zero for an empty list.
pub fn mean_dice_grad(pairs: &[(&[f64], &[f64])]) -> Result<(f64, Vec<Vec<f64>>)> {
    if pairs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (p, t) in pairs {
        let (l, mut g) = dice_loss_grad(p, t)?;
        total += l;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Still-image segmentation term: mean dice over every positive location of
/// both frames.
pub fn segmentation_loss(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    Ok(mean_dice_grad(pairs)?.0)
}
