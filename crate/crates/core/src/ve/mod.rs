//! Visual-entailment scorer: rates how well a dense caption is supported by
//! an image.

mod gradcheck;
mod loss;
mod model;
mod train;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::captions::{CaptionTriple, StrategyPlan};
use crate::error::{Error, Result};
use crate::synthworld::FeatureStore;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradEntry, GradScope, REL_ERROR_FLOOR};
pub use loss::{loss_ssl, loss_total, loss_ve};
pub use model::{text_key, text_vocabulary, VeArch, VeModel, UNK};
pub use train::{irrelevant_partners, train_ve, VeTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntailmentLabel {
    Entailment,
    Contradiction,
}

impl EntailmentLabel {
    /// Any positive soft target counts as entailment.
    pub fn from_target(t: f64) -> Self {
        if t > 0.0 {
            EntailmentLabel::Entailment
        } else {
            EntailmentLabel::Contradiction
        }
    }
}

/// Scores every triple. Order of the output follows `triples`.
pub fn score_triples(model: &VeModel, triples: &[CaptionTriple], features: &FeatureStore) -> Result<Vec<f64>> {
    triples
        .par_iter()
        .map(|t| model.score(features.get(&t.image_id)?, &t.caption))
        .collect()
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the answer vocabulary the captions were built from.
    pub vocab_hash: String,
    pub plan: StrategyPlan,
    /// Candidates per question during training.
    pub trained_n: usize,
}

const VE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VeFile {
    format_version: u32,
    tool_version: String,
    #[serde(flatten)]
    meta: VeMeta,
    arch: VeArch,
    text_vocab: Vec<String>,
    params: ParamSet,
}

pub fn save_ve(model: &VeModel, meta: &VeMeta, path: &Path) -> Result<()> {
    let file = VeFile {
        format_version: VE_FORMAT_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        meta: meta.clone(),
        arch: model.arch,
        text_vocab: model.text_vocab().to_vec(),
        params: model.params.clone(),
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_ve(path: &Path) -> Result<(VeModel, VeMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: VeFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        record: 1,
        message: e.to_string(),
    })?;
    if file.format_version != VE_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported scorer format version {}",
            path.display(),
            file.format_version
        )));
    }
    file.arch.validate()?;
    let reference = VeModel::new(file.arch, file.text_vocab.clone(), 0)?;
    let shapes_match = reference.params.names == file.params.names
        && reference
            .params
            .tensors
            .iter()
            .zip(&file.params.tensors)
            .all(|(a, b)| a.shape() == b.shape() && b.data.len() == b.rows * b.cols);
    if !shapes_match || !file.params.all_finite() {
        return Err(Error::Validation(format!(
            "{}: parameter tensors do not match the declared architecture",
            path.display()
        )));
    }
    Ok((VeModel::from_parts(file.arch, file.text_vocab, file.params), file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::{build_captions, build_category_dict, CaptionDataset, Phase};
    use crate::cas::{Candidate, CandidateSet};
    use crate::synthworld::{generate_world, DatasetSplit, World, WorldConfig};

    fn world(num_images: usize) -> World {
        generate_world(&WorldConfig {
            num_images,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    /// The true answer plus the next `n - 1` answers of the same category
    /// support, in a fixed order.
    fn oracle_candidates(split: &DatasetSplit, cfg: &WorldConfig, n: usize) -> Vec<CandidateSet> {
        use crate::synthworld::Category;
        split
            .examples
            .iter()
            .map(|ex| {
                let cat = Category::ALL
                    .into_iter()
                    .find(|c| c.prefix() == ex.question_category)
                    .unwrap();
                let truth = ex.best_answer().to_string();
                let mut answers = vec![truth.clone()];
                answers.extend(cat.support(cfg).into_iter().filter(|a| *a != truth).take(n - 1));
                CandidateSet {
                    example_id: ex.id.clone(),
                    entries: answers
                        .into_iter()
                        .enumerate()
                        .map(|(index, answer)| Candidate { index, answer, score: 0.0 })
                        .collect(),
                }
            })
            .collect()
    }

    fn captions(w: &World, split: &DatasetSplit, n: usize, plan: StrategyPlan) -> CaptionDataset {
        let dict = build_category_dict(&w.train).unwrap();
        let cands = oracle_candidates(split, &w.config, n);
        build_captions(split, &cands, plan, Phase::Train, &dict).unwrap()
    }

    fn small_arch(d: usize) -> VeArch {
        VeArch {
            d_model: d,
            hidden: d,
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_and_training_is_deterministic() {
        let w = world(60);
        let mut data = captions(&w, &w.train, 4, StrategyPlan::R);
        data.triples.truncate(100);
        let vocab = text_vocabulary(&w.train);
        let cfg = VeTrainConfig::default();
        let m = VeModel::new(cfg.arch, vocab.clone(), 1).unwrap();
        let (a, curve) = train_ve(m.clone(), &data, &w.features, &cfg).unwrap();
        let drops = curve.windows(2).filter(|p| p[1] < p[0]).count();
        assert!(drops >= 8, "{curve:?}");
        let (b, curve2) = train_ve(m, &data, &w.features, &cfg).unwrap();
        assert_eq!(curve, curve2);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let w = world(30);
        let data = captions(&w, &w.train, 3, StrategyPlan::C);
        let cfg = VeTrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 8,
            arch: small_arch(8),
            ..Default::default()
        };
        let m = VeModel::new(cfg.arch, text_vocabulary(&w.train), 2).unwrap();
        let (trained, curve) = train_ve(m.clone(), &data, &w.features, &cfg).unwrap();
        assert_eq!(trained, m);
        assert!(curve.windows(2).all(|p| (p[0] - p[1]).abs() < 1e-12), "{curve:?}");
    }

    #[test]
    fn training_separates_entailment_from_contradiction() {
        let w = world(150);
        let data = captions(&w, &w.train, 3, StrategyPlan::R);
        let cfg = VeTrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 3e-3,
            arch: small_arch(16),
            ..Default::default()
        };
        let m = VeModel::new(cfg.arch, text_vocabulary(&w.train), 3).unwrap();
        let (m, _) = train_ve(m, &data, &w.features, &cfg).unwrap();
        let held_out = captions(&w, &w.val_iid, 3, StrategyPlan::R);
        let scores = score_triples(&m, &held_out.triples, &w.features).unwrap();
        let mean = |label: EntailmentLabel| {
            let v: Vec<f64> = held_out
                .triples
                .iter()
                .zip(&scores)
                .filter(|(t, _)| EntailmentLabel::from_target(t.target) == label)
                .map(|(_, s)| *s)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(EntailmentLabel::Entailment) > mean(EntailmentLabel::Contradiction));
    }

    #[test]
    fn ssl_requires_two_slots_and_nonnegative_alpha() {
        let mut cfg = VeTrainConfig {
            ssl_enabled: true,
            batch_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
        cfg.batch_size = 2;
        cfg.alpha = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partners_skip_same_image() {
        let w = world(30);
        let data = captions(&w, &w.train, 3, StrategyPlan::C);
        let batch: Vec<&CaptionTriple> = data.triples.iter().take(7).collect();
        let partners = irrelevant_partners(&batch);
        for (i, p) in partners.iter().enumerate() {
            let j = p.unwrap();
            assert_ne!(batch[i].image_id, batch[j].image_id);
            // every slot strictly between i and j shares i's image
            let mut k = (i + 1) % batch.len();
            while k != j {
                assert_eq!(batch[k].image_id, batch[i].image_id);
                k = (k + 1) % batch.len();
            }
        }
        let same: Vec<&CaptionTriple> = data.triples.iter().take(3).collect();
        assert!(irrelevant_partners(&same).iter().all(Option::is_none));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = world(30);
        let data = captions(&w, &w.train, 3, StrategyPlan::R);
        let batch: Vec<&CaptionTriple> = data.triples.iter().take(6).collect();
        let m = VeModel::new(small_arch(16), text_vocabulary(&w.train), 4).unwrap();
        let head = grad_check(&m, &w.features, &batch, Some(1.0), 1e-4, GradScope::HeadOnly, 0).unwrap();
        assert!(head.max_rel_error < 1e-6, "{}", head.max_rel_error);
        let full = grad_check(&m, &w.features, &batch, Some(1.0), 1e-4, GradScope::Full { per_tensor: 20 }, 0).unwrap();
        assert!(full.max_rel_error < 1e-4, "{}", full.max_rel_error);
    }

    #[test]
    fn unused_embedding_rows_have_zero_gradient() {
        let w = world(30);
        let data = captions(&w, &w.train, 2, StrategyPlan::C);
        let batch: Vec<&CaptionTriple> = data.triples.iter().take(2).collect();
        let vocab = text_vocabulary(&w.train);
        let m = VeModel::new(small_arch(8), vocab.clone(), 4).unwrap();
        let used: Vec<usize> = batch.iter().flat_map(|t| m.token_ids(&t.caption)).collect();
        let unused = (0..vocab.len()).find(|r| !used.contains(r)).unwrap();
        let report = grad_check(&m, &w.features, &batch, None, 1e-4, GradScope::Full { per_tensor: usize::MAX }, 0).unwrap();
        let d = m.arch.d_model;
        let row: Vec<&GradEntry> = report
            .entries
            .iter()
            .filter(|e| e.tensor == "tok_emb" && e.index / d == unused)
            .collect();
        assert_eq!(row.len(), d);
        for e in row {
            assert!(e.analytic.abs() < 1e-8 && e.numeric.abs() < 1e-8, "{e:?}");
        }
    }

    #[test]
    fn model_file_round_trip() {
        let w = world(30);
        let m = VeModel::new(small_arch(8), text_vocabulary(&w.train), 6).unwrap();
        let meta = VeMeta {
            seed: 6,
            config_hash: "abc".into(),
            vocab_hash: w.train.vocab_hash(),
            plan: StrategyPlan::R_TO_C,
            trained_n: 12,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ve.model");
        save_ve(&m, &meta, &p).unwrap();
        let (m2, meta2) = load_ve(&p).unwrap();
        assert_eq!(m2, m);
        assert_eq!(meta2, meta);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("\"d_model\":8", "\"d_model\":4")).unwrap();
        assert!(load_ve(&p).is_err());
    }

    #[test]
    fn labels_from_targets() {
        assert_eq!(EntailmentLabel::from_target(1.0), EntailmentLabel::Entailment);
        assert_eq!(EntailmentLabel::from_target(0.3), EntailmentLabel::Entailment);
        assert_eq!(EntailmentLabel::from_target(0.0), EntailmentLabel::Contradiction);
    }
}
