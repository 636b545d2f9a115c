//! Candidate answer selection.
//!
//! A selector scores every answer in the vocabulary for an (image, question)
//! pair; [`select_topn`] keeps the N best. Selector backends implement
//! [`CandidateSelector`] and are looked up by name in [`registry`], so a new
//! base classifier only needs a train function and a loader.

mod linear;
mod select;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{vocab_hash, DatasetSplit, FeatureStore, VqaExample};

pub use linear::LinearCas;
pub use select::{select_topn, topn_recall, Candidate, CandidateSet};

pub trait CandidateSelector: Send + Sync + std::fmt::Debug {
    /// Registry name of the backend.
    fn backend(&self) -> &'static str;

    fn answer_vocabulary(&self) -> &[String];

    /// One score per vocabulary entry, in vocabulary order.
    fn predict_scores(&self, example: &VqaExample, features: &FeatureStore) -> Result<Vec<f64>>;

    /// Backend-specific weights, as stored in the model file.
    fn weights_json(&self) -> Result<serde_json::Value>;

    fn select(&self, example: &VqaExample, features: &FeatureStore, n: usize) -> Result<CandidateSet> {
        let scores = self.predict_scores(example, features)?;
        let vocab = self.answer_vocabulary();
        let entries = select_topn(&scores, n)?
            .into_iter()
            .map(|i| Candidate {
                index: i,
                answer: vocab[i].clone(),
                score: scores[i],
            })
            .collect();
        Ok(CandidateSet {
            example_id: example.id.clone(),
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasTrainConfig {
    pub backend: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CasTrainConfig {
    fn default() -> Self {
        CasTrainConfig {
            backend: LinearCas::NAME.to_string(),
            epochs: 30,
            lr: 0.5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl CasTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("cas.batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("cas.lr = {} must be >= 0", self.lr)));
        }
        backend(&self.backend).map(|_| ())
    }
}

/// Mean training loss before and after training.
#[derive(Debug, Clone, PartialEq)]
pub struct CasTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub type TrainFn =
    fn(&DatasetSplit, &FeatureStore, &CasTrainConfig) -> Result<(Box<dyn CandidateSelector>, CasTrainReport)>;
pub type LoadFn = fn(Vec<String>, serde_json::Value) -> Result<Box<dyn CandidateSelector>>;

pub struct SelectorBackend {
    pub name: &'static str,
    pub train: TrainFn,
    pub load: LoadFn,
}

static BACKENDS: &[SelectorBackend] = &[SelectorBackend {
    name: LinearCas::NAME,
    train: linear::train_boxed,
    load: linear::load_boxed,
}];

pub fn registry() -> &'static [SelectorBackend] {
    BACKENDS
}

pub fn backend(name: &str) -> Result<&'static SelectorBackend> {
    BACKENDS.iter().find(|b| b.name == name).ok_or_else(|| {
        let known: Vec<&str> = BACKENDS.iter().map(|b| b.name).collect();
        Error::Config(format!("unknown CAS backend `{name}` (known: {})", known.join(", ")))
    })
}

pub fn train_cas(
    split: &DatasetSplit,
    features: &FeatureStore,
    cfg: &CasTrainConfig,
) -> Result<(Box<dyn CandidateSelector>, CasTrainReport)> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::InvalidInput("cannot train CAS on an empty split".into()));
    }
    features.covers(split)?;
    (backend(&cfg.backend)?.train)(split, features, cfg)
}

const CAS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CasFile {
    format_version: u32,
    tool_version: String,
    backend: String,
    seed: u64,
    config_hash: String,
    vocab_hash: String,
    answer_vocabulary: Vec<String>,
    weights: serde_json::Value,
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_cas(model: &dyn CandidateSelector, cfg: &CasTrainConfig, path: &Path) -> Result<()> {
    let file = CasFile {
        format_version: CAS_FORMAT_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        backend: model.backend().to_string(),
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        vocab_hash: vocab_hash(model.answer_vocabulary()),
        answer_vocabulary: model.answer_vocabulary().to_vec(),
        weights: model.weights_json()?,
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_cas(path: &Path) -> Result<Box<dyn CandidateSelector>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CasFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        record: 1,
        message: e.to_string(),
    })?;
    if file.format_version != CAS_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported CAS format version {}",
            path.display(),
            file.format_version
        )));
    }
    let found = vocab_hash(&file.answer_vocabulary);
    if found != file.vocab_hash {
        return Err(Error::VocabularyMismatch {
            expected: file.vocab_hash,
            found,
        });
    }
    (backend(&file.backend)?.load)(file.answer_vocabulary, file.weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_backend_is_a_config_error() {
        let cfg = CasTrainConfig {
            backend: "updn".into(),
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("linear"));
    }

    #[test]
    fn registry_lists_linear() {
        assert!(registry().iter().any(|b| b.name == "linear"));
    }
}
