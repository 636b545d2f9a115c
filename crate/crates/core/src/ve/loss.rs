use crate::autodiff::bce_with_logits;
use crate::error::{Error, Result};

/// Multi-label soft loss: mean binary cross-entropy of logits against soft
/// targets over all M·N (caption, target) pairs.
pub fn loss_ve(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} logits for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidInput(format!("target {t} outside [0, 1]")));
    }
    let total: f64 = logits.iter().zip(targets).map(|(&z, &t)| bce_with_logits(z, t)).sum();
    Ok(total / logits.len() as f64)
}

/// Self-supervised penalty: `alpha` times the mean relevance score the model
/// assigns to mismatched (image, caption) pairs.
pub fn loss_ssl(irrelevant_scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha = {alpha} must be >= 0")));
    }
    if irrelevant_scores.is_empty() {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    if let Some(p) = irrelevant_scores.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidInput(format!("score {p} outside (0, 1)")));
    }
    Ok(alpha * irrelevant_scores.iter().sum::<f64>() / irrelevant_scores.len() as f64)
}

pub fn loss_total(l_ve: f64, l_ssl: f64) -> Result<f64> {
    if !l_ve.is_finite() || !l_ssl.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite loss component (ve = {l_ve}, ssl = {l_ssl})"
        )));
    }
    Ok(l_ve + l_ssl)
}
