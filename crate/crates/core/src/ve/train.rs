use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{VeArch, VeModel};
use crate::autodiff::{Adam, Graph, Matrix, Var};
use crate::captions::{CaptionDataset, CaptionTriple};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::synthworld::FeatureStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the mismatched-pair penalty.
    pub alpha: f64,
    pub ssl_enabled: bool,
    pub arch: VeArch,
}

impl Default for VeTrainConfig {
    fn default() -> Self {
        VeTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            alpha: 1.0,
            ssl_enabled: false,
            arch: VeArch::default(),
        }
    }
}

impl VeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("ve.alpha = {} must be >= 0", self.alpha)));
        }
        if self.batch_size == 0 || (self.ssl_enabled && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "ve.batch_size = {} must be >= 1, and >= 2 with ssl_enabled",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("ve.lr = {} must be >= 0", self.lr)));
        }
        self.arch.validate()
    }
}

/// For each batch slot, the next slot (cyclically) whose image differs.
/// `None` when every slot shows the same image.
pub fn irrelevant_partners(batch: &[&CaptionTriple]) -> Vec<Option<usize>> {
    let n = batch.len();
    (0..n)
        .map(|i| {
            (1..n)
                .map(|k| (i + k) % n)
                .find(|&j| batch[j].image_id != batch[i].image_id)
        })
        .collect()
}

/// Loss contribution of one batch slot, already divided by the batch size.
#[allow(clippy::too_many_arguments)]
pub(crate) fn slot_loss(
    model: &VeModel,
    g: &mut Graph,
    vars: &[Var],
    features: &FeatureStore,
    triple: &CaptionTriple,
    partner: Option<&CaptionTriple>,
    alpha: f64,
    batch_len: usize,
) -> Result<Var> {
    let image = features.get(&triple.image_id)?;
    let z = model.logit_on(g, vars, image, &triple.caption)?;
    let bce = g.bce_with_logits(z, &[triple.target]);
    let mut loss = g.scale(bce, 1.0 / batch_len as f64);
    if let Some(p) = partner {
        let other = features.get(&p.image_id)?;
        let zi = model.logit_on(g, vars, other, &triple.caption)?;
        let prob = g.sigmoid(zi);
        let pen = g.scale(prob, alpha / batch_len as f64);
        loss = g.add(loss, pen);
    }
    Ok(loss)
}

/// Total loss over one batch, forward only.
pub(crate) fn batch_loss(
    model: &VeModel,
    features: &FeatureStore,
    batch: &[&CaptionTriple],
    ssl: Option<f64>,
) -> Result<f64> {
    let partners = match ssl {
        Some(_) => irrelevant_partners(batch),
        None => vec![None; batch.len()],
    };
    let alpha = ssl.unwrap_or(0.0);
    let mut total = 0.0;
    for (triple, partner) in batch.iter().zip(&partners) {
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let partner = partner.map(|j| batch[j]);
        let loss = slot_loss(model, &mut g, &vars, features, triple, partner, alpha, batch.len())?;
        total += g.value(loss).item();
    }
    Ok(total)
}

/// Total loss and parameter gradients over one batch.
pub(crate) fn batch_gradients(
    model: &VeModel,
    features: &FeatureStore,
    batch: &[&CaptionTriple],
    ssl: Option<f64>,
) -> Result<(f64, Vec<Matrix>)> {
    let partners = match ssl {
        Some(_) => irrelevant_partners(batch),
        None => vec![None; batch.len()],
    };
    let alpha = ssl.unwrap_or(0.0);
    let per_slot: Vec<(f64, Vec<Matrix>)> = batch
        .par_iter()
        .zip(partners.par_iter())
        .map(|(triple, partner)| {
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let partner = partner.map(|j| batch[j]);
            let loss = slot_loss(model, &mut g, &vars, features, triple, partner, alpha, batch.len())?;
            let grads = g.backward(loss);
            Ok((g.value(loss).item(), model.params.grads(&vars, &grads)))
        })
        .collect::<Result<_>>()?;

    // Fixed-order reduction keeps results independent of thread scheduling.
    let mut total = 0.0;
    let mut sum: Vec<Matrix> = model
        .params
        .tensors
        .iter()
        .map(|t| Matrix::zeros(t.rows, t.cols))
        .collect();
    for (loss, grads) in per_slot {
        total += loss;
        for (s, g) in sum.iter_mut().zip(grads) {
            for (a, b) in s.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
    }
    Ok((total, sum))
}

/// Adam over shuffled minibatches. Returns the model and the mean training
/// loss of every epoch.
pub fn train_ve(
    mut model: VeModel,
    data: &CaptionDataset,
    features: &FeatureStore,
    cfg: &VeTrainConfig,
) -> Result<(VeModel, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot train the scorer on an empty caption set".into()));
    }
    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let ssl = cfg.ssl_enabled.then_some(cfg.alpha);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CaptionTriple> = chunk.iter().map(|&i| &data.triples[i]).collect();
            let (loss, grads) = batch_gradients(&model, features, &batch, ssl)?;
            if !loss.is_finite() || !grads.iter().all(Matrix::is_finite) {
                return Err(Error::Diverged {
                    step,
                    param_norm: model.params.norm(),
                });
            }
            epoch_total += loss * batch.len() as f64;
            opt.step(&mut model.params, &grads);
            step += 1;
        }
        curve.push(epoch_total / data.len() as f64);
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged {
            step,
            param_norm: model.params.norm(),
        });
    }
    Ok((model, curve))
}
