use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Prediction, Sar};
use crate::cas::topn_recall;
use crate::error::{Error, Result};
use crate::synthworld::{DatasetSplit, FeatureStore, QuestionType, VqaExample};

/// Soft accuracy: the target of the chosen answer, 0 when absent.
pub fn vqa_accuracy(prediction: &Prediction, example: &VqaExample) -> f64 {
    example.target(&prediction.chosen_answer).min(1.0)
}

/// Accuracy on the iid split minus accuracy on the shifted split.
pub fn gap(accuracy_iid: f64, accuracy_shifted: f64) -> f64 {
    accuracy_iid - accuracy_shifted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub num_examples: usize,
    pub accuracy_all: f64,
    pub accuracy_yes_no: f64,
    pub accuracy_non_yes_no: f64,
    pub num_yes_no: usize,
    pub num_non_yes_no: usize,
    /// Present only when an iid split was evaluated too.
    pub accuracy_iid: Option<f64>,
    pub gap: Option<f64>,
    pub r_fallbacks: usize,
    pub topn_recall_curve: BTreeMap<usize, f64>,
    pub per_category_breakdown: BTreeMap<String, CategoryStats>,
}

struct Tally {
    by_id: BTreeMap<String, (f64, QuestionType, String)>,
    fallbacks: usize,
}

fn tally(sar: &Sar<'_>, split: &DatasetSplit, features: &FeatureStore) -> Result<Tally> {
    features.covers(split)?;
    let preds = sar.predict_all(&split.examples, features)?;
    let mut by_id = BTreeMap::new();
    let mut fallbacks = 0;
    for (p, ex) in preds.iter().zip(&split.examples) {
        fallbacks += usize::from(p.r_fallback);
        by_id.insert(
            ex.id.clone(),
            (vqa_accuracy(p, ex), ex.question_type, ex.question_category.clone()),
        );
    }
    Ok(Tally { by_id, fallbacks })
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

/// Sums run in example-id order, so the report does not depend on the
/// order of examples in the split.
pub fn evaluate(
    sar: &Sar<'_>,
    split: &DatasetSplit,
    features: &FeatureStore,
    iid: Option<&DatasetSplit>,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidInput(format!("split `{}` is empty", split.name)));
    }
    let t = tally(sar, split, features)?;
    let (accuracy_all, num_examples) = mean(t.by_id.values().map(|v| v.0));
    let of_type = |qt: QuestionType| mean(t.by_id.values().filter(|v| v.1 == qt).map(|v| v.0));
    let (accuracy_yes_no, num_yes_no) = of_type(QuestionType::YesNo);
    let (accuracy_non_yes_no, num_non_yes_no) = of_type(QuestionType::NonYesNo);
    let mut per_category_breakdown = BTreeMap::new();
    let cats: std::collections::BTreeSet<&String> = t.by_id.values().map(|v| &v.2).collect();
    for cat in cats {
        let (accuracy, count) = mean(t.by_id.values().filter(|v| &v.2 == cat).map(|v| v.0));
        per_category_breakdown.insert(cat.clone(), CategoryStats { count, accuracy });
    }
    let accuracy_iid = match iid {
        Some(s) if !s.is_empty() => Some(mean(tally(sar, s, features)?.by_id.values().map(|v| v.0)).0),
        _ => None,
    };
    let ns: Vec<usize> = (1..=sar.cas.answer_vocabulary().len()).collect();
    Ok(EvalReport {
        split: split.name.to_string(),
        num_examples,
        accuracy_all,
        accuracy_yes_no,
        accuracy_non_yes_no,
        num_yes_no,
        num_non_yes_no,
        accuracy_iid,
        gap: accuracy_iid.map(|a| gap(a, accuracy_all)),
        r_fallbacks: t.fallbacks,
        topn_recall_curve: topn_recall(sar.cas, split, features, &ns)?,
        per_category_breakdown,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
    /// Shifted-split accuracy minus that of the selector-only row.
    pub delta_vs_cas_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Evaluates every configuration on the same data. One configuration must
/// be selector-only; it is the reference for the delta column.
pub fn ablate(
    configs: &[(String, Sar<'_>)],
    split: &DatasetSplit,
    features: &FeatureStore,
    iid: Option<&DatasetSplit>,
) -> Result<AblationTable> {
    let reports: Vec<(String, EvalReport)> = configs
        .iter()
        .map(|(name, sar)| Ok((name.clone(), evaluate(sar, split, features, iid)?)))
        .collect::<Result<_>>()?;
    let base = configs
        .iter()
        .position(|(_, s)| s.ve.is_none())
        .ok_or_else(|| Error::InvalidInput("ablation needs a selector-only row".into()))?;
    let base_acc = reports[base].1.accuracy_all;
    Ok(AblationTable {
        rows: reports
            .into_iter()
            .map(|(name, report)| AblationRow {
                name,
                delta_vs_cas_only: report.accuracy_all - base_acc,
                report,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub question_type: QuestionType,
    pub n_prime: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn series(&self, qt: QuestionType) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter(|p| p.question_type == qt)
            .map(|p| (p.n_prime, p.accuracy))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("question_type,n_prime,count,accuracy\n");
        for p in &self.points {
            let qt = match p.question_type {
                QuestionType::YesNo => "yes_no",
                QuestionType::NonYesNo => "non_yes_no",
            };
            writeln!(s, "{qt},{},{},{}", p.n_prime, p.count, p.accuracy).expect("write to string");
        }
        s
    }
}

/// Accuracy per question type for every candidate count in the given
/// ranges. Examples are grouped by their annotated type; each type uses its
/// own range.
pub fn sweep_n_prime(
    sar: &Sar<'_>,
    split: &DatasetSplit,
    features: &FeatureStore,
    ns_yes_no: &[usize],
    ns_other: &[usize],
) -> Result<SweepCurve> {
    if sar.ve.is_none() {
        return Err(Error::InvalidInput("a sweep needs an entailment scorer".into()));
    }
    if let Some(&bad) = ns_yes_no
        .iter()
        .chain(ns_other)
        .find(|&&n| n == 0 || n > sar.trained_n)
    {
        return Err(Error::Config(format!(
            "sweep value N' = {bad} outside [1, {}]",
            sar.trained_n
        )));
    }
    features.covers(split)?;
    let range_for = |qt: QuestionType| match qt {
        QuestionType::YesNo => ns_yes_no,
        QuestionType::NonYesNo => ns_other,
    };
    let per_example: Vec<Vec<f64>> = split
        .examples
        .par_iter()
        .map(|ex| {
            let ns = range_for(ex.question_type);
            let Some(&max_n) = ns.iter().max() else {
                return Ok(Vec::new());
            };
            let scored = sar.scored(ex, features, max_n)?;
            Ok(ns.iter().map(|&n| vqa_accuracy(&scored.predict(&ex.id, n), ex)).collect())
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for qt in [QuestionType::YesNo, QuestionType::NonYesNo] {
        let rows: Vec<&Vec<f64>> = split
            .examples
            .iter()
            .zip(&per_example)
            .filter(|(ex, _)| ex.question_type == qt)
            .map(|(_, r)| r)
            .collect();
        for (k, &n) in range_for(qt).iter().enumerate() {
            let (accuracy, count) = mean(rows.iter().map(|r| r[k]));
            points.push(SweepPoint {
                question_type: qt,
                n_prime: n,
                count,
                accuracy,
            });
        }
    }
    Ok(SweepCurve { points })
}
