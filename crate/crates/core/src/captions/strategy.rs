use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dict::normalize_token;
use crate::error::{Error, Result};

pub const R_MAX_TOKENS: usize = 15;
pub const C_MAX_TOKENS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    R,
    C,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::R => "R",
            StrategyKind::C => "C",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Question and answer fused into one statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCaption {
    /// Surface tokens; case is preserved, models normalize on lookup.
    pub tokens: Vec<String>,
    pub strategy: StrategyKind,
    pub source_answer: String,
    pub trimmed_to: usize,
}

impl DenseCaption {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A way of turning (question, answer) into a caption.
pub trait CombinationStrategy: Send + Sync {
    fn kind(&self) -> StrategyKind;

    fn max_tokens(&self) -> usize;

    /// `category` is the question category as found by the caller; only
    /// strategies that rewrite the question prefix need it.
    fn combine(&self, question: &[String], category: Option<&str>, answer: &str) -> Result<DenseCaption>;
}

fn answer_tokens(answer: &str) -> impl Iterator<Item = String> + '_ {
    answer.split_whitespace().map(String::from)
}

fn finish(mut tokens: Vec<String>, kind: StrategyKind, max: usize, answer: &str) -> DenseCaption {
    tokens.truncate(max);
    DenseCaption {
        tokens,
        strategy: kind,
        source_answer: answer.to_string(),
        trimmed_to: max,
    }
}

/// Replaces the question-category prefix with the answer and drops the
/// question mark.
#[derive(Debug, Clone, Copy, Default)]
pub struct Replace;

impl CombinationStrategy for Replace {
    fn kind(&self) -> StrategyKind {
        StrategyKind::R
    }

    fn max_tokens(&self) -> usize {
        R_MAX_TOKENS
    }

    fn combine(&self, question: &[String], category: Option<&str>, answer: &str) -> Result<DenseCaption> {
        let category = category.ok_or_else(|| {
            Error::InvalidInput("strategy R needs the question category".into())
        })?;
        let cat: Vec<String> = category.split_whitespace().map(normalize_token).collect();
        let is_prefix = cat.len() <= question.len()
            && cat.iter().zip(question).all(|(c, q)| *c == normalize_token(q));
        if !is_prefix {
            return Err(Error::InvalidInput(format!(
                "category `{category}` is not a prefix of `{}`",
                question.join(" ")
            )));
        }
        let mut rest: Vec<String> = question[cat.len()..].to_vec();
        if let Some(last) = rest.last_mut() {
            let stripped = last.trim_end_matches('?').to_string();
            if stripped.is_empty() {
                rest.pop();
            } else {
                *last = stripped;
            }
        }
        let tokens = answer_tokens(answer).chain(rest).collect();
        Ok(finish(tokens, self.kind(), self.max_tokens(), answer))
    }
}

/// Puts the answer in front of the full question. Trimming cuts from the
/// end, so the answer always survives.
#[derive(Debug, Clone, Copy, Default)]
pub struct Concat;

impl CombinationStrategy for Concat {
    fn kind(&self) -> StrategyKind {
        StrategyKind::C
    }

    fn max_tokens(&self) -> usize {
        C_MAX_TOKENS
    }

    fn combine(&self, question: &[String], _category: Option<&str>, answer: &str) -> Result<DenseCaption> {
        let tokens = answer_tokens(answer).chain(question.iter().cloned()).collect();
        Ok(finish(tokens, self.kind(), self.max_tokens(), answer))
    }
}

static REPLACE: Replace = Replace;
static CONCAT: Concat = Concat;
static STRATEGIES: &[(&str, &dyn CombinationStrategy)] = &[("R", &REPLACE), ("C", &CONCAT)];

/// Registered strategy names.
pub fn strategy_names() -> impl Iterator<Item = &'static str> {
    STRATEGIES.iter().map(|(n, _)| *n)
}

pub fn strategy(name: &str) -> Result<&'static dyn CombinationStrategy> {
    STRATEGIES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| {
            let known: Vec<&str> = strategy_names().collect();
            Error::Config(format!("unknown combination strategy `{name}` (known: {})", known.join(", ")))
        })
}

pub fn strategy_for(kind: StrategyKind) -> &'static dyn CombinationStrategy {
    strategy(kind.name()).expect("built-in strategy")
}

pub fn combine_r(question: &[String], category: &str, answer: &str) -> Result<DenseCaption> {
    Replace.combine(question, Some(category), answer)
}

pub fn combine_c(question: &[String], answer: &str) -> Result<DenseCaption> {
    Concat.combine(question, None, answer)
}

/// Which strategy builds training captions and which builds test captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StrategyPlan {
    train: StrategyKind,
    test: StrategyKind,
}

impl StrategyPlan {
    pub const R: StrategyPlan = StrategyPlan {
        train: StrategyKind::R,
        test: StrategyKind::R,
    };
    pub const C: StrategyPlan = StrategyPlan {
        train: StrategyKind::C,
        test: StrategyKind::C,
    };
    pub const R_TO_C: StrategyPlan = StrategyPlan {
        train: StrategyKind::R,
        test: StrategyKind::C,
    };

    /// Training on concatenations and testing on replacements is rejected.
    pub fn new(train: StrategyKind, test: StrategyKind) -> Result<Self> {
        if train == StrategyKind::C && test == StrategyKind::R {
            return Err(Error::Config("strategy plan C->R is not supported".into()));
        }
        Ok(StrategyPlan { train, test })
    }

    pub fn train(self) -> StrategyKind {
        self.train
    }

    pub fn test(self) -> StrategyKind {
        self.test
    }

    pub fn for_phase(self, phase: Phase) -> StrategyKind {
        match phase {
            Phase::Train => self.train,
            Phase::Test => self.test,
        }
    }

    pub fn name(self) -> &'static str {
        match (self.train, self.test) {
            (StrategyKind::R, StrategyKind::R) => "R",
            (StrategyKind::C, StrategyKind::C) => "C",
            (StrategyKind::R, StrategyKind::C) => "RtoC",
            (StrategyKind::C, StrategyKind::R) => unreachable!("rejected by constructor"),
        }
    }
}

impl fmt::Display for StrategyPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (train, test) = match s.trim() {
            "R" => ("R", "R"),
            "C" => ("C", "C"),
            "RtoC" | "R->C" | "R→C" => ("R", "C"),
            "CtoR" | "C->R" | "C→R" => ("C", "R"),
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy plan `{other}` (expected R, C or RtoC)"
                )))
            }
        };
        StrategyPlan::new(strategy(train)?.kind(), strategy(test)?.kind())
    }
}

impl TryFrom<String> for StrategyPlan {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StrategyPlan> for String {
    fn from(p: StrategyPlan) -> String {
        p.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}
