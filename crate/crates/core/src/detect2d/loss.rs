//! Soft dice loss `1 − (2·Σ x·y + ε) / (Σ x + Σ y + ε)`.

use crate::{Error, Result};

/// Smoothing term keeping the loss defined on empty targets.
pub const DICE_EPS: f64 = 1.0;

/// Loss and gradient with respect to the predictions, in `f64`.
pub fn soft_dice(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!(
            "dice inputs differ in size ({} vs {})",
            pred.len(),
            target.len()
        )));
    }
    let inter: f64 = pred.iter().zip(target).map(|(x, y)| x * y).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    let num = 2.0 * inter + eps;
    let den = total + eps;
    let loss = 1.0 - num / den;
    let grad = target.iter().map(|y| -(2.0 * y * den - num) / (den * den)).collect();
    Ok((loss, grad))
}

/// Soft dice loss with the default smoothing.
pub fn dice_loss(pred: &[f32], target: &[f32]) -> Result<f64> {
    dice_loss_eps(pred, target, DICE_EPS)
}

pub fn dice_loss_eps(pred: &[f32], target: &[f32], eps: f64) -> Result<f64> {
    dice_with_grad(pred, target, eps).map(|(l, _)| l)
}

/// `f32` convenience wrapper returning the gradient for backpropagation.
pub fn dice_with_grad(pred: &[f32], target: &[f32], eps: f64) -> Result<(f64, Vec<f32>)> {
    let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let (l, g) = soft_dice(&p, &t, eps)?;
    Ok((l, g.into_iter().map(|v| v as f32).collect()))
}
