//! Question-category dictionary, forward maximum matching and the
//! question/answer combination strategies that produce dense captions.

mod dict;
mod strategy;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cas::CandidateSet;
use crate::error::{Error, Result};
use crate::synthworld::{DatasetSplit, VqaExample};

pub use dict::{build_category_dict, normalize_token, CategoryDict};
pub use strategy::{
    combine_c, combine_r, strategy, strategy_for, strategy_names, CombinationStrategy, Concat,
    DenseCaption, Phase, Replace, StrategyKind, StrategyPlan, C_MAX_TOKENS, R_MAX_TOKENS,
};

/// One (image, caption, target) instance for the entailment scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionTriple {
    pub example_id: String,
    pub image_id: String,
    pub caption: DenseCaption,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptionDataset {
    pub triples: Vec<CaptionTriple>,
    /// Test examples where R found no category and C was used instead.
    pub r_fallbacks: usize,
}

impl CaptionDataset {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Captions for one example's candidates under `kind`.
///
/// In the train phase R uses the annotated category; at test time the
/// category comes from the dictionary, and a miss falls back to C. The
/// returned flag is true on fallback.
pub fn captions_for_example(
    example: &VqaExample,
    answers: &[&str],
    kind: StrategyKind,
    phase: Phase,
    dict: &CategoryDict,
) -> Result<(Vec<DenseCaption>, bool)> {
    let (kind, category, fallback) = match (kind, phase) {
        (StrategyKind::C, _) => (StrategyKind::C, None, false),
        (StrategyKind::R, Phase::Train) => (StrategyKind::R, Some(example.question_category.clone()), false),
        (StrategyKind::R, Phase::Test) => match dict.fmm_match(&example.question) {
            Some(cat) => (StrategyKind::R, Some(cat), false),
            None => (StrategyKind::C, None, true),
        },
    };
    let s = strategy_for(kind);
    let caps = answers
        .iter()
        .map(|a| s.combine(&example.question, category.as_deref(), a))
        .collect::<Result<_>>()?;
    Ok((caps, fallback))
}

/// Builds the M×N caption instances for a split and its candidate sets.
pub fn build_captions(
    split: &DatasetSplit,
    candidates: &[CandidateSet],
    plan: StrategyPlan,
    phase: Phase,
    dict: &CategoryDict,
) -> Result<CaptionDataset> {
    if candidates.len() != split.examples.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidate sets for {} examples",
            candidates.len(),
            split.examples.len()
        )));
    }
    let kind = plan.for_phase(phase);
    let mut out = CaptionDataset::default();
    for (ex, cands) in split.examples.iter().zip(candidates) {
        if cands.example_id != ex.id {
            return Err(Error::InvalidInput(format!(
                "candidate set for `{}` paired with example `{}`",
                cands.example_id, ex.id
            )));
        }
        let answers: Vec<&str> = cands.answers().collect();
        let (caps, fallback) = captions_for_example(ex, &answers, kind, phase, dict)?;
        out.r_fallbacks += usize::from(fallback);
        for (caption, answer) in caps.into_iter().zip(&answers) {
            out.triples.push(CaptionTriple {
                example_id: ex.id.clone(),
                image_id: ex.image_id.clone(),
                caption,
                target: ex.target(answer),
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionHeader {
    num_triples: usize,
    r_fallbacks: usize,
}

pub fn write_caption_dataset(data: &CaptionDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CaptionHeader {
        num_triples: data.triples.len(),
        r_fallbacks: data.r_fallbacks,
    };
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    put(serde_json::to_string(&header)?)?;
    for t in &data.triples {
        put(serde_json::to_string(t)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_caption_dataset(path: &Path) -> Result<CaptionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |record: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        record,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: CaptionHeader = match lines.next() {
        Some((_, l)) => serde_json::from_str(l).map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let triples: Vec<CaptionTriple> = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string())))
        .collect::<Result<_>>()?;
    if triples.len() != header.num_triples {
        return Err(parse_err(
            triples.len() + 2,
            format!("expected {} triples, found {}", header.num_triples, triples.len()),
        ));
    }
    Ok(CaptionDataset {
        triples,
        r_fallbacks: header.r_fallbacks,
    })
}
