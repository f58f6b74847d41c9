//! Categorical cross-entropy, categorical focal loss, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub focal_weight: f64,
    /// Focusing exponent of the focal term.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 1.0,
            focal_weight: 0.5,
            gamma: 2.0,
        }
    }
}

fn validate(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(
            "loss inputs",
            format!("prediction has {} classes, target {}", pred.len(), target.len()),
        ));
    }
    let sum: f64 = pred.iter().sum();
    if pred.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotAProbability(format!("prediction sums to {sum}")));
    }
    let ones = target.iter().filter(|&&t| t == 1.0).count();
    let zeros = target.iter().filter(|&&t| t == 0.0).count();
    if ones != 1 || ones + zeros != target.len() {
        return Err(Error::invalid("target", "not a one-hot vector"));
    }
    Ok(())
}

pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    validate(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum())
}

/// `-(1 - p_t)^gamma * ln(p_t)` summed over the target class.
pub fn focal(pred: &[f64], target: &[f64], gamma: f64) -> Result<f64> {
    validate(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| {
            let p = p.max(PROB_FLOOR);
            -t * (1.0 - p).powf(gamma) * p.ln()
        })
        .sum())
}

/// Weighted sum `ce_weight * CE + focal_weight * Focal`.
pub fn combined_loss(pred: &[f64], target: &[f64], config: &LossConfig) -> Result<f64> {
    Ok(config.ce_weight * cross_entropy(pred, target)? + config.focal_weight * focal(pred, target, config.gamma)?)
}

/// Loss value and its gradient with respect to the probability vector.
pub fn combined_loss_grad(pred: &[f64], target: &[f64], config: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let loss = combined_loss(pred, target, config)?;
    let gamma = config.gamma;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            if t == 0.0 || p < PROB_FLOOR {
                // Zero for non-target classes; the clamp is flat below the floor.
                return 0.0;
            }
            let ln_p = p.ln();
            let d_ce = -1.0 / p;
            let shrink = if gamma == 0.0 || ln_p == 0.0 {
                0.0
            } else {
                gamma * (1.0 - p).powf(gamma - 1.0) * ln_p
            };
            let d_focal = shrink - (1.0 - p).powf(gamma) / p;
            t * (config.ce_weight * d_ce + config.focal_weight * d_focal)
        })
        .collect();
    Ok((loss, grad))
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}
