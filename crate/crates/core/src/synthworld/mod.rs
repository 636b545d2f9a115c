//! Synthetic visual-QA world with a controllable answer-prior shift.
//!
//! Images are bags of `K` objects, each encoded as a `D`-dimensional vector:
//! a one-hot object type, a one-hot color, two position coordinates and a
//! low-amplitude noise tail. Questions are generated from five templates
//! whose leading tokens form the question category. Answers are sampled
//! from a per-category distribution that is skewed toward one majority
//! answer in the train split and toward a different one in the shifted
//! test split; images are then constructed so the sampled answer is true.

mod config;
mod generate;
mod io;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::WorldConfig;
pub use generate::{decode_object, generate_world, Category, DecodedObject, World};
pub use io::{
    read_dataset, read_features, read_split, read_world, write_dataset, write_features,
    write_split, write_world, FEATURES_FILE, WORLD_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    YesNo,
    NonYesNo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    TestShifted,
    ValIid,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::TestShifted, SplitName::ValIid];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestShifted => "test_shifted",
            SplitName::ValIid => "val_iid",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: String,
    /// `K` rows of length `D`.
    pub vectors: Vec<Vec<f64>>,
}

impl ImageFeatures {
    pub fn num_objects(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Column-wise mean over the object rows.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for row in &self.vectors {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let k = self.vectors.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= k);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaExample {
    pub id: String,
    pub image_id: String,
    pub question: Vec<String>,
    pub question_category: String,
    pub question_type: QuestionType,
    /// Soft target score per answer label. Labels not present score 0.
    pub answer_targets: BTreeMap<String, f64>,
}

impl VqaExample {
    pub fn target(&self, answer: &str) -> f64 {
        self.answer_targets.get(answer).copied().unwrap_or(0.0)
    }

    /// The answer with the highest target score. Ties go to the label that
    /// sorts first, which keeps the choice deterministic.
    pub fn best_answer(&self) -> &str {
        let mut best: Option<(&str, f64)> = None;
        for (label, &t) in &self.answer_targets {
            if best.is_none_or(|(_, bt)| t > bt) {
                best = Some((label, t));
            }
        }
        best.map(|(l, _)| l).unwrap_or("")
    }

    pub fn question_text(&self) -> String {
        self.question.join(" ")
    }

    pub fn category_tokens(&self) -> Vec<&str> {
        self.question_category.split_whitespace().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<VqaExample>,
    pub answer_vocabulary: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn answer_index(&self) -> HashMap<&str, usize> {
        self.answer_vocabulary
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect()
    }

    /// Checks vocabulary closure and target ranges for every example.
    pub fn validate(&self) -> Result<()> {
        let index = self.answer_index();
        if index.len() != self.answer_vocabulary.len() {
            return Err(Error::Validation(format!(
                "split {}: answer vocabulary contains duplicates",
                self.name
            )));
        }
        for ex in &self.examples {
            validate_example(ex, &index)?;
        }
        Ok(())
    }

    pub fn vocab_hash(&self) -> String {
        vocab_hash(&self.answer_vocabulary)
    }
}

pub(crate) fn validate_example(ex: &VqaExample, index: &HashMap<&str, usize>) -> Result<()> {
    if ex.answer_targets.is_empty() || !ex.answer_targets.values().any(|&t| t > 0.0) {
        return Err(Error::Validation(format!(
            "example {} has no positive answer target",
            ex.id
        )));
    }
    for (label, &t) in &ex.answer_targets {
        if !index.contains_key(label.as_str()) {
            return Err(Error::Validation(format!(
                "example {} references unknown answer label `{label}`",
                ex.id
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Validation(format!(
                "example {}: target for `{label}` is {t}, outside [0, 1]",
                ex.id
            )));
        }
    }
    let lowered: Vec<String> = ex.question.iter().map(|t| t.to_lowercase()).collect();
    let cat: Vec<&str> = ex.category_tokens();
    if cat.is_empty() || cat.len() > lowered.len() || cat.iter().zip(&lowered).any(|(c, q)| *c != q) {
        return Err(Error::Validation(format!(
            "example {}: category `{}` is not a prefix of the question",
            ex.id, ex.question_category
        )));
    }
    Ok(())
}

/// Hex SHA-256 over the newline-joined vocabulary.
pub fn vocab_hash(vocab: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for a in vocab {
        h.update(a.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Image features indexed by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    images: Vec<ImageFeatures>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(images: Vec<ImageFeatures>) -> Result<Self> {
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.image_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate image id `{}`",
                    img.image_id
                )));
            }
        }
        Ok(FeatureStore { images, index })
    }

    pub fn get(&self, image_id: &str) -> Result<&ImageFeatures> {
        self.index
            .get(image_id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn images(&self) -> &[ImageFeatures] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map_or(0, ImageFeatures::dim)
    }

    pub fn covers(&self, split: &DatasetSplit) -> Result<()> {
        for ex in &split.examples {
            self.get(&ex.image_id)?;
        }
        Ok(())
    }
}
