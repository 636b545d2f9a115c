use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CandidateSelector;
use crate::error::{Error, Result};
use crate::synthworld::{DatasetSplit, FeatureStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Vocabulary index.
    pub index: usize,
    pub answer: String,
    pub score: f64,
}

/// The N answers kept for one example, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub example_id: String,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn answers(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.answer.as_str())
    }

    pub fn truncated(&self, n: usize) -> CandidateSet {
        CandidateSet {
            example_id: self.example_id.clone(),
            entries: self.entries.iter().take(n).cloned().collect(),
        }
    }
}

/// Indices of the `n` largest scores, descending; equal scores keep
/// ascending index order.
pub fn select_topn(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > scores.len() {
        return Err(Error::InvalidInput(format!(
            "N = {n} must lie in [1, {}]",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {i} is NaN")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Adding 0.0 maps -0.0 to +0.0 so both zeros tie.
    let key = |i: usize| scores[i] + 0.0;
    let by_rank = |&a: &usize, &b: &usize| key(b).total_cmp(&key(a)).then(a.cmp(&b));
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, by_rank);
        idx.truncate(n);
    }
    idx.sort_by(by_rank);
    Ok(idx)
}

/// Fraction of examples whose best-target answer ranks within the top N,
/// for each requested N.
pub fn topn_recall(
    model: &dyn CandidateSelector,
    split: &DatasetSplit,
    features: &FeatureStore,
    n_values: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let vocab_len = model.answer_vocabulary().len();
    if let Some(&bad) = n_values.iter().find(|&&n| n == 0 || n > vocab_len) {
        return Err(Error::InvalidInput(format!("N = {bad} must lie in [1, {vocab_len}]")));
    }
    let index: std::collections::HashMap<&str, usize> = model
        .answer_vocabulary()
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let mut hits: BTreeMap<usize, usize> = n_values.iter().map(|&n| (n, 0)).collect();
    for ex in &split.examples {
        let scores = model.predict_scores(ex, features)?;
        let best = index[ex.best_answer()];
        let ranking = select_topn(&scores, vocab_len)?;
        let rank = ranking.iter().position(|&i| i == best).expect("full ranking");
        for (n, h) in hits.iter_mut() {
            if rank < *n {
                *h += 1;
            }
        }
    }
    let m = split.examples.len().max(1) as f64;
    Ok(hits.into_iter().map(|(n, h)| (n, h as f64 / m)).collect())
}
