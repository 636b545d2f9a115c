use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CandidateSelector, CasTrainConfig, CasTrainReport};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::synthworld::{DatasetSplit, FeatureStore, VqaExample};

/// Linear scorer over `[bag of question tokens | mean-pooled image | 1]`,
/// trained with softmax cross-entropy against normalized soft targets.
///
/// Mean pooling discards which color belongs to which object, so this
/// model leans on the question-category prior. That is what makes it a
/// useful first stage to rerank.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCas {
    answer_vocabulary: Vec<String>,
    question_vocabulary: Vec<String>,
    token_index: HashMap<String, usize>,
    feature_dim: usize,
    /// `|A|` rows of `input_dim` weights.
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearWeights {
    question_vocabulary: Vec<String>,
    feature_dim: usize,
    weights: Vec<Vec<f64>>,
}

impl LinearCas {
    pub const NAME: &'static str = "linear";

    pub fn zeros(answer_vocabulary: Vec<String>, question_vocabulary: Vec<String>, feature_dim: usize) -> Self {
        let token_index = question_vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let input_dim = question_vocabulary.len() + feature_dim + 1;
        let weights = vec![vec![0.0; input_dim]; answer_vocabulary.len()];
        LinearCas {
            answer_vocabulary,
            question_vocabulary,
            token_index,
            feature_dim,
            weights,
        }
    }

    /// Question vocabulary of `split`, sorted.
    pub fn question_vocabulary_of(split: &DatasetSplit) -> Vec<String> {
        let mut v: Vec<String> = split
            .examples
            .iter()
            .flat_map(|e| e.question.iter().map(|t| t.to_lowercase()))
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn input_dim(&self) -> usize {
        self.question_vocabulary.len() + self.feature_dim + 1
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn token_slot(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    /// Offset of the first image-feature input.
    pub fn image_offset(&self) -> usize {
        self.question_vocabulary.len()
    }

    fn input(&self, example: &VqaExample, features: &FeatureStore) -> Result<Vec<f64>> {
        let image = features.get(&example.image_id)?;
        if image.dim() != self.feature_dim {
            return Err(Error::InvalidInput(format!(
                "image {} has feature dim {}, model expects {}",
                image.image_id,
                image.dim(),
                self.feature_dim
            )));
        }
        let mut x = vec![0.0; self.input_dim()];
        for tok in &example.question {
            if let Some(&i) = self.token_index.get(&tok.to_lowercase()) {
                x[i] = 1.0;
            }
        }
        let off = self.image_offset();
        x[off..off + self.feature_dim].copy_from_slice(&image.mean_pooled());
        *x.last_mut().expect("bias slot") = 1.0;
        Ok(x)
    }

    fn scores_for(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn target_distribution(&self, example: &VqaExample) -> Vec<f64> {
        let mut t: Vec<f64> = self.answer_vocabulary.iter().map(|a| example.target(a)).collect();
        let total: f64 = t.iter().sum();
        t.iter_mut().for_each(|x| *x /= total);
        t
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn cross_entropy(p: &[f64], target: &[f64]) -> f64 {
    -p.iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(p, t)| t * p.max(1e-300).ln())
        .sum::<f64>()
}

impl CandidateSelector for LinearCas {
    fn backend(&self) -> &'static str {
        Self::NAME
    }

    fn answer_vocabulary(&self) -> &[String] {
        &self.answer_vocabulary
    }

    fn predict_scores(&self, example: &VqaExample, features: &FeatureStore) -> Result<Vec<f64>> {
        Ok(self.scores_for(&self.input(example, features)?))
    }

    fn weights_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(LinearWeights {
            question_vocabulary: self.question_vocabulary.clone(),
            feature_dim: self.feature_dim,
            weights: self.weights.clone(),
        })?)
    }
}

fn mean_loss(model: &LinearCas, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let total: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| cross_entropy(&softmax(&model.scores_for(x)), t))
        .sum();
    total / inputs.len() as f64
}

/// Minibatch SGD from zero weights; the seed drives the example order.
pub fn train(
    split: &DatasetSplit,
    features: &FeatureStore,
    cfg: &CasTrainConfig,
) -> Result<(LinearCas, CasTrainReport)> {
    let mut model = LinearCas::zeros(
        split.answer_vocabulary.clone(),
        LinearCas::question_vocabulary_of(split),
        features.feature_dim(),
    );
    let inputs: Vec<Vec<f64>> = split
        .examples
        .iter()
        .map(|e| model.input(e, features))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = split.examples.iter().map(|e| model.target_distribution(e)).collect();
    let initial_loss = mean_loss(&model, &inputs, &targets);

    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let n_out = model.answer_vocabulary.len();
    let dim = model.input_dim();
    let mut grad = vec![vec![0.0; dim]; n_out];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
            for &i in batch {
                let x = &inputs[i];
                let p = softmax(&model.scores_for(x));
                for (a, g) in grad.iter_mut().enumerate() {
                    let d = p[a] - targets[i][a];
                    if d == 0.0 {
                        continue;
                    }
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += d * xj;
                    }
                }
            }
            let step = cfg.lr / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                for (wj, gj) in w.iter_mut().zip(g) {
                    *wj -= step * gj;
                }
            }
        }
    }
    let final_loss = mean_loss(&model, &inputs, &targets);
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.epochs,
            param_norm: model.weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt(),
        });
    }
    Ok((model, CasTrainReport { initial_loss, final_loss }))
}

pub(super) fn train_boxed(
    split: &DatasetSplit,
    features: &FeatureStore,
    cfg: &CasTrainConfig,
) -> Result<(Box<dyn CandidateSelector>, CasTrainReport)> {
    let (m, r) = train(split, features, cfg)?;
    Ok((Box::new(m), r))
}

pub(super) fn load_boxed(
    answer_vocabulary: Vec<String>,
    weights: serde_json::Value,
) -> Result<Box<dyn CandidateSelector>> {
    let w: LinearWeights = serde_json::from_value(weights)?;
    let mut model = LinearCas::zeros(answer_vocabulary, w.question_vocabulary, w.feature_dim);
    let ok = w.weights.len() == model.weights.len()
        && w.weights.iter().all(|r| r.len() == model.input_dim());
    if !ok {
        return Err(Error::Validation("linear CAS weights have the wrong shape".into()));
    }
    model.weights = w.weights;
    Ok(Box::new(model))
}
