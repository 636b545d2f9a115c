use rand::seq::index::sample;

use super::model::{VeModel, HEAD_TENSORS};
use super::train::{batch_gradients, batch_loss};
use crate::captions::CaptionTriple;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::synthworld::FeatureStore;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every entry of the dense head.
    HeadOnly,
    /// Up to `per_tensor` random entries of every tensor.
    Full { per_tensor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradEntry>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the total loss on `batch` with central
/// differences of step `epsilon`.
pub fn grad_check(
    model: &VeModel,
    features: &FeatureStore,
    batch: &[&CaptionTriple],
    ssl_alpha: Option<f64>,
    epsilon: f64,
    scope: GradScope,
    seed: u64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("grad check needs a non-empty batch".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon = {epsilon} must be > 0")));
    }
    let (_, analytic) = batch_gradients(model, features, batch, ssl_alpha)?;
    let mut rng = seeded(seed);
    let mut probe = model.clone();
    let mut entries = Vec::new();
    for (t, name) in model.params.names.iter().enumerate() {
        let size = model.params.tensors[t].data.len();
        let picks: Vec<usize> = match scope {
            GradScope::HeadOnly if HEAD_TENSORS.contains(&name.as_str()) => (0..size).collect(),
            GradScope::HeadOnly => continue,
            GradScope::Full { per_tensor } if per_tensor >= size => (0..size).collect(),
            GradScope::Full { per_tensor } => {
                let mut v = sample(&mut rng, size, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in picks {
            let orig = model.params.tensors[t].data[i];
            probe.params.tensors[t].data[i] = orig + epsilon;
            let up = batch_loss(&probe, features, batch, ssl_alpha)?;
            probe.params.tensors[t].data[i] = orig - epsilon;
            let down = batch_loss(&probe, features, batch, ssl_alpha)?;
            probe.params.tensors[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[t].data[i];
            entries.push(GradEntry {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, entries })
}
