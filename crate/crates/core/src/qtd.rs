//! Question type discriminator: a small GRU that tells yes/no questions
//! from the rest, used to pick how many candidates to rerank.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Adam, Graph, Matrix, ParamSet, Var};
use crate::error::{Error, Result};
use crate::rng::{seeded, substream};
use crate::synthworld::{DatasetSplit, QuestionType, VqaExample};
use crate::ve::{text_key, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QtdConfig {
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for QtdConfig {
    fn default() -> Self {
        QtdConfig {
            folds: 5,
            epochs: 4,
            lr: 0.01,
            batch_size: 16,
            seed: 0,
            embed_dim: 16,
            hidden: 32,
        }
    }
}

impl QtdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("qtd.folds = {} must be >= 2", self.folds)));
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("qtd.batch_size, embed_dim and hidden must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("qtd.lr = {} must be >= 0", self.lr)));
        }
        Ok(())
    }
}

/// Candidate counts per predicted question type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NPrimePolicy {
    pub n_prime_yes_no: usize,
    pub n_prime_other: usize,
}

impl Default for NPrimePolicy {
    fn default() -> Self {
        NPrimePolicy::new(2, 6)
    }
}

impl NPrimePolicy {
    pub const fn new(n_prime_yes_no: usize, n_prime_other: usize) -> Self {
        NPrimePolicy {
            n_prime_yes_no,
            n_prime_other,
        }
    }

    /// Both values must lie in `1..=trained_n`.
    pub fn validate(&self, trained_n: usize) -> Result<()> {
        for (name, v) in [("n_prime_yes_no", self.n_prime_yes_no), ("n_prime_other", self.n_prime_other)] {
            if v == 0 || v > trained_n {
                return Err(Error::Config(format!(
                    "policy.{name} = {v} must be between 1 and N = {trained_n}"
                )));
            }
        }
        Ok(())
    }

    pub fn for_type(&self, qt: QuestionType) -> usize {
        match qt {
            QuestionType::YesNo => self.n_prime_yes_no,
            QuestionType::NonYesNo => self.n_prime_other,
        }
    }

    /// The classifier has no effect when both types get the same count.
    pub fn is_uniform(&self) -> bool {
        self.n_prime_yes_no == self.n_prime_other
    }
}

const PARAM_NAMES: [&str; 12] = [
    "emb", "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n", "out_w", "out_b",
];
const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct QtdModel {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub hidden: usize,
    pub params: ParamSet,
}

fn question_vocabulary(examples: &[&VqaExample]) -> Vec<String> {
    let set: BTreeSet<String> = examples
        .iter()
        .flat_map(|e| e.question.iter().map(|t| text_key(t)))
        .filter(|t| t != UNK)
        .collect();
    std::iter::once(UNK.to_string()).chain(set).collect()
}

impl QtdModel {
    fn new(vocab: Vec<String>, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut init = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let mut params = ParamSet::new();
        params.push("emb", init(vocab.len(), embed_dim));
        for gate in ["z", "r", "n"] {
            params.push(&format!("w_{gate}"), init(embed_dim, hidden));
            params.push(&format!("u_{gate}"), init(hidden, hidden));
            params.push(&format!("b_{gate}"), Matrix::zeros(1, hidden));
        }
        params.push("out_w", init(hidden, 1));
        params.push("out_b", Matrix::zeros(1, 1));
        Self::from_parts(vocab, hidden, params)
    }

    fn from_parts(vocab: Vec<String>, hidden: usize, params: ParamSet) -> Self {
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        QtdModel {
            vocab,
            index,
            hidden,
            params,
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index.get(&text_key(t)).copied().unwrap_or(0))
            .collect()
    }

    fn logit_on(&self, g: &mut Graph, vars: &[Var], tokens: &[String]) -> Var {
        let p = |name: &str| vars[self.params.index_of(name).expect("qtd parameter")];
        let mut h = g.leaf(Matrix::zeros(1, self.hidden));
        for id in self.token_ids(tokens) {
            let x = g.gather(p("emb"), &[id]);
            let gate = |g: &mut Graph, w: Var, u: Var, b: Var, h: Var| {
                let xw = g.matmul(x, w);
                let hu = g.matmul(h, u);
                let s = g.add(xw, hu);
                g.add(s, b)
            };
            let z = gate(g, p("w_z"), p("u_z"), p("b_z"), h);
            let z = g.sigmoid(z);
            let r = gate(g, p("w_r"), p("u_r"), p("b_r"), h);
            let r = g.sigmoid(r);
            let rh = g.mul(r, h);
            let n = gate(g, p("w_n"), p("u_n"), p("b_n"), rh);
            let n = g.tanh(n);
            // h' = n + z * (h - n)
            let neg_n = g.scale(n, -1.0);
            let diff = g.add(h, neg_n);
            let keep = g.mul(z, diff);
            h = g.add(n, keep);
        }
        let o = g.matmul(h, p("out_w"));
        g.add(o, p("out_b"))
    }

    /// Probability that the question is yes/no.
    pub fn prob_yes_no(&self, tokens: &[String]) -> f64 {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let z = self.logit_on(&mut g, &vars, tokens);
        sigmoid(g.value(z).item())
    }
}

pub fn classify_type(model: &QtdModel, tokens: &[String]) -> QuestionType {
    if model.prob_yes_no(tokens) >= 0.5 {
        QuestionType::YesNo
    } else {
        QuestionType::NonYesNo
    }
}

/// Candidate count for a question. A uniform policy skips the classifier.
pub fn n_prime_for(model: Option<&QtdModel>, tokens: &[String], policy: &NPrimePolicy) -> Result<usize> {
    if policy.is_uniform() {
        return Ok(policy.n_prime_other);
    }
    let model = model.ok_or_else(|| {
        Error::Config("a question type model is required when the policy counts differ".into())
    })?;
    Ok(policy.for_type(classify_type(model, tokens)))
}

/// Held-out fold of every example: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, 1));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn fit(examples: &[&VqaExample], cfg: &QtdConfig, seed: u64) -> Result<QtdModel> {
    let mut model = QtdModel::new(question_vocabulary(examples), cfg.embed_dim, cfg.hidden, seed);
    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut rng = substream(seed, 2);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut sum: Vec<Matrix> = model
                .params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect();
            let mut loss_total = 0.0;
            for &i in chunk {
                let ex = examples[i];
                let target = f64::from(u8::from(ex.question_type == QuestionType::YesNo));
                let mut g = Graph::new();
                let vars = model.params.bind(&mut g);
                let z = model.logit_on(&mut g, &vars, &ex.question);
                let bce = g.bce_with_logits(z, &[target]);
                let loss = g.scale(bce, 1.0 / chunk.len() as f64);
                loss_total += g.value(loss).item();
                let grads = g.backward(loss);
                for (s, d) in sum.iter_mut().zip(model.params.grads(&vars, &grads)) {
                    for (a, b) in s.data.iter_mut().zip(d.data) {
                        *a += b;
                    }
                }
            }
            if !loss_total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    param_norm: model.params.norm(),
                });
            }
            opt.step(&mut model.params, &sum);
            step += 1;
        }
    }
    Ok(model)
}

fn accuracy(model: &QtdModel, examples: &[&VqaExample]) -> f64 {
    let hits = examples
        .iter()
        .filter(|e| classify_type(model, &e.question) == e.question_type)
        .count();
    hits as f64 / examples.len() as f64
}

/// Cross-validated accuracy over `cfg.folds` folds, then a final model fit
/// on the whole split.
pub fn train_qtd(split: &DatasetSplit, cfg: &QtdConfig) -> Result<(QtdModel, f64)> {
    cfg.validate()?;
    let classes: BTreeSet<QuestionType> = split.examples.iter().map(|e| e.question_type).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidInput(
            "question type training needs both yes/no and other questions".into(),
        ));
    }
    if split.len() < cfg.folds {
        return Err(Error::InvalidInput(format!(
            "{} examples cannot fill {} folds",
            split.len(),
            cfg.folds
        )));
    }
    let fold = fold_assignment(split.len(), cfg.folds, cfg.seed);
    let mut acc_sum = 0.0;
    for k in 0..cfg.folds {
        let (held, train): (Vec<_>, Vec<_>) = split.examples.iter().zip(&fold).partition(|(_, &f)| f == k);
        let held: Vec<&VqaExample> = held.into_iter().map(|(e, _)| e).collect();
        let train: Vec<&VqaExample> = train.into_iter().map(|(e, _)| e).collect();
        let m = fit(&train, cfg, cfg.seed.wrapping_add(k as u64 + 1))?;
        acc_sum += accuracy(&m, &held);
    }
    let all: Vec<&VqaExample> = split.examples.iter().collect();
    let model = fit(&all, cfg, cfg.seed)?;
    Ok((model, acc_sum / cfg.folds as f64))
}

const QTD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QtdFile {
    format_version: u32,
    tool_version: String,
    seed: u64,
    config_hash: String,
    cv_accuracy: f64,
    hidden: usize,
    vocab: Vec<String>,
    params: ParamSet,
}

pub fn save_qtd(model: &QtdModel, cfg: &QtdConfig, cv_accuracy: f64, path: &Path) -> Result<()> {
    let file = QtdFile {
        format_version: QTD_FORMAT_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        seed: cfg.seed,
        config_hash: crate::cas::config_hash(cfg)?,
        cv_accuracy,
        hidden: model.hidden,
        vocab: model.vocab.clone(),
        params: model.params.clone(),
    };
    fs::write(path, serde_json::to_string(&file)? + "\n").map_err(|e| Error::io(path, e))
}

/// Returns the model and its stored cross-validation accuracy.
pub fn load_qtd(path: &Path) -> Result<(QtdModel, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: QtdFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        record: 1,
        message: e.to_string(),
    })?;
    if file.format_version != QTD_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported question type model version {}",
            path.display(),
            file.format_version
        )));
    }
    let names_ok = file.params.names.iter().map(String::as_str).eq(PARAM_NAMES);
    if !names_ok || !file.params.all_finite() || file.vocab.first().map(String::as_str) != Some(UNK) {
        return Err(Error::Validation(format!("{}: malformed question type model", path.display())));
    }
    Ok((QtdModel::from_parts(file.vocab, file.hidden, file.params), file.cv_accuracy))
}
