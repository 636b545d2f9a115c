//! End-to-end answering: select candidates, caption them, rerank by
//! entailment score. Also evaluation, ablations and candidate-count sweeps.

mod eval;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captions::{captions_for_example, CategoryDict, Phase, StrategyPlan};
use crate::cas::{CandidateSelector, CandidateSet};
use crate::error::{Error, Result};
use crate::qtd::{n_prime_for, NPrimePolicy, QtdModel};
use crate::synthworld::{FeatureStore, VqaExample};
use crate::ve::VeModel;

pub use eval::{
    ablate, evaluate, gap, sweep_n_prime, vqa_accuracy, AblationRow, AblationTable, CategoryStats, EvalReport,
    SweepCurve, SweepPoint,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub chosen_answer: String,
    /// Caption of the chosen answer; absent when nothing was reranked.
    pub chosen_caption: Option<String>,
    /// In candidate-rank order. Entailment scores, or selector scores when
    /// no scorer is attached.
    pub candidate_scores: Vec<(String, f64)>,
    pub n_prime_used: usize,
    /// Set when the test-time category lookup failed and C was used.
    pub r_fallback: bool,
}

/// The assembled answering system. Without a scorer it degenerates to the
/// selector's top-1.
#[derive(Clone, Copy)]
pub struct Sar<'a> {
    pub cas: &'a dyn CandidateSelector,
    pub ve: Option<&'a VeModel>,
    pub qtd: Option<&'a QtdModel>,
    pub dict: &'a CategoryDict,
    pub plan: StrategyPlan,
    pub policy: NPrimePolicy,
    /// Candidate count the scorer was trained with.
    pub trained_n: usize,
}

/// Index of the highest score; the earliest (best-ranked) wins ties.
pub(crate) fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Candidates and, when a scorer is attached, their entailment scores.
pub(crate) struct Scored {
    pub cands: CandidateSet,
    pub captions: Vec<String>,
    pub scores: Vec<f64>,
    pub fallback: bool,
}

impl<'a> Sar<'a> {
    pub fn cas_only(cas: &'a dyn CandidateSelector, dict: &'a CategoryDict) -> Self {
        Sar {
            cas,
            ve: None,
            qtd: None,
            dict,
            plan: StrategyPlan::R_TO_C,
            policy: NPrimePolicy::new(1, 1),
            trained_n: 1,
        }
    }

    pub fn n_prime(&self, example: &VqaExample) -> Result<usize> {
        if self.ve.is_none() {
            return Ok(1);
        }
        let n = n_prime_for(self.qtd, &example.question, &self.policy)?;
        if n > self.trained_n {
            return Err(Error::InvalidInput(format!(
                "N' = {n} exceeds the N = {} the scorer was trained with",
                self.trained_n
            )));
        }
        Ok(n)
    }

    /// Top `n` candidates with their scores.
    pub(crate) fn scored(&self, example: &VqaExample, features: &FeatureStore, n: usize) -> Result<Scored> {
        let cands = self.cas.select(example, features, n)?;
        let Some(ve) = self.ve else {
            return Ok(Scored {
                scores: cands.entries.iter().map(|c| c.score).collect(),
                captions: Vec::new(),
                cands,
                fallback: false,
            });
        };
        let answers: Vec<&str> = cands.answers().collect();
        let (caps, fallback) = captions_for_example(example, &answers, self.plan.test(), Phase::Test, self.dict)?;
        let image = features.get(&example.image_id)?;
        let scores = caps.iter().map(|c| ve.score(image, c)).collect::<Result<_>>()?;
        Ok(Scored {
            captions: caps.iter().map(|c| c.text()).collect(),
            cands,
            scores,
            fallback,
        })
    }

    pub fn infer(&self, example: &VqaExample, features: &FeatureStore) -> Result<Prediction> {
        let n = self.n_prime(example)?;
        let s = self.scored(example, features, n)?;
        Ok(s.predict(&example.id, n))
    }

    /// Predictions for every example, in input order.
    pub fn predict_all(&self, examples: &[VqaExample], features: &FeatureStore) -> Result<Vec<Prediction>> {
        examples.par_iter().map(|ex| self.infer(ex, features)).collect()
    }
}

impl Scored {
    /// Prediction restricted to the first `n` candidates.
    pub fn predict(&self, example_id: &str, n: usize) -> Prediction {
        let n = n.min(self.cands.len());
        let best = argmax_first(&self.scores[..n]);
        Prediction {
            example_id: example_id.to_string(),
            chosen_answer: self.cands.entries[best].answer.clone(),
            chosen_caption: self.captions.get(best).cloned(),
            candidate_scores: self.cands.entries[..n]
                .iter()
                .zip(&self.scores)
                .map(|(c, &s)| (c.answer.clone(), s))
                .collect(),
            n_prime_used: n,
            r_fallback: self.fallback,
        }
    }
}

/// Convenience wrapper over [`Sar::infer`].
#[allow(clippy::too_many_arguments)]
pub fn infer_answer(
    cas: &dyn CandidateSelector,
    ve: &VeModel,
    qtd: Option<&QtdModel>,
    dict: &CategoryDict,
    plan: StrategyPlan,
    policy: NPrimePolicy,
    trained_n: usize,
    example: &VqaExample,
    features: &FeatureStore,
) -> Result<Prediction> {
    Sar {
        cas,
        ve: Some(ve),
        qtd,
        dict,
        plan,
        policy,
        trained_n,
    }
    .infer(example, features)
}
