use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Matrix, ParamSet, Var};
use crate::captions::DenseCaption;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::synthworld::{DatasetSplit, ImageFeatures};

pub const UNK: &str = "<unk>";

/// Half-width of the uniform init for a `rows x cols` tensor. A fixed
/// narrow range leaves the stacked attention layers with vanishing signal
/// and the scorer never leaves the answer-prior solution.
fn xavier_range(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Layer sizes of the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VeArch {
    pub d_model: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub feature_dim: usize,
}

impl Default for VeArch {
    fn default() -> Self {
        VeArch {
            d_model: 32,
            heads: 2,
            hidden: 32,
            max_len: 18,
            feature_dim: 24,
        }
    }
}

impl VeArch {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model = {} must be a positive multiple of heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.hidden == 0 || self.max_len == 0 || self.feature_dim == 0 {
            return Err(Error::Config("hidden, max_len and feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameter slots, in [`ParamSet`] order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slots {
    pub tok_emb: usize,
    pub sa: [usize; 4],
    pub vis_w: usize,
    pub vis_b: usize,
    pub vis_null: usize,
    pub ca: [usize; 4],
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
}

pub(crate) const HEAD_TENSORS: [&str; 4] = ["head_w1", "head_b1", "head_w2", "head_b2"];

/// Two-stream entailment scorer: caption self-attention, a linear visual
/// projection, caption-to-object cross-attention with a learned null key,
/// mean pooling, and a one-hidden-layer ReLU head producing a single logit.
#[derive(Debug, Clone, PartialEq)]
pub struct VeModel {
    pub arch: VeArch,
    text_vocab: Vec<String>,
    token_index: HashMap<String, usize>,
    pub params: ParamSet,
}

/// Lowercase with trailing `?` removed; a lone `?` stays as is.
pub fn text_key(token: &str) -> String {
    let lower = token.to_lowercase();
    let stripped = lower.trim_end_matches('?');
    if stripped.is_empty() {
        lower
    } else {
        stripped.to_string()
    }
}

/// Token vocabulary covering questions of `split` and all answers.
pub fn text_vocabulary(split: &DatasetSplit) -> Vec<String> {
    let mut set: BTreeSet<String> = BTreeSet::new();
    for ex in &split.examples {
        set.extend(ex.question.iter().map(|t| text_key(t)));
    }
    for a in &split.answer_vocabulary {
        set.extend(a.split_whitespace().map(text_key));
    }
    set.remove(UNK);
    std::iter::once(UNK.to_string()).chain(set).collect()
}

impl VeModel {
    /// Parameters uniform in a Glorot range per tensor, drawn from `seed`.
    pub fn new(arch: VeArch, text_vocab: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if text_vocab.first().map(String::as_str) != Some(UNK) {
            return Err(Error::InvalidInput(format!("text vocabulary must start with {UNK}")));
        }
        let mut rng = seeded(seed);
        let mut init = |rows: usize, cols: usize| {
            let r = xavier_range(rows, cols);
            let data = (0..rows * cols).map(|_| rng.gen_range(-r..r)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let d = arch.d_model;
        let mut params = ParamSet::new();
        params.push("tok_emb", init(text_vocab.len(), d));
        for n in ["sa_q", "sa_k", "sa_v", "sa_o"] {
            params.push(n, init(d, d));
        }
        params.push("vis_w", init(arch.feature_dim, d));
        params.push("vis_b", init(1, d));
        params.push("vis_null", init(1, d));
        for n in ["ca_q", "ca_k", "ca_v", "ca_o"] {
            params.push(n, init(d, d));
        }
        params.push("head_w1", init(d, arch.hidden));
        params.push("head_b1", init(1, arch.hidden));
        params.push("head_w2", init(arch.hidden, 1));
        params.push("head_b2", init(1, 1));
        Ok(Self::from_parts(arch, text_vocab, params))
    }

    pub(crate) fn from_parts(arch: VeArch, text_vocab: Vec<String>, params: ParamSet) -> Self {
        let token_index = text_vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        VeModel {
            arch,
            text_vocab,
            token_index,
            params,
        }
    }

    pub fn text_vocab(&self) -> &[String] {
        &self.text_vocab
    }

    /// Sets the output layer to zero, so every logit is 0.
    pub fn zero_head(&mut self) {
        for name in ["head_w2", "head_b2"] {
            let i = self.params.index_of(name).expect("head tensor");
            self.params.tensors[i].data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub(crate) fn slots(&self) -> Slots {
        let p = |n: &str| self.params.index_of(n).expect("parameter slot");
        Slots {
            tok_emb: p("tok_emb"),
            sa: [p("sa_q"), p("sa_k"), p("sa_v"), p("sa_o")],
            vis_w: p("vis_w"),
            vis_b: p("vis_b"),
            vis_null: p("vis_null"),
            ca: [p("ca_q"), p("ca_k"), p("ca_v"), p("ca_o")],
            head_w1: p("head_w1"),
            head_b1: p("head_b1"),
            head_w2: p("head_w2"),
            head_b2: p("head_b2"),
        }
    }

    pub fn token_ids(&self, caption: &DenseCaption) -> Vec<usize> {
        caption
            .tokens
            .iter()
            .take(self.arch.max_len)
            .map(|t| self.token_index.get(&text_key(t)).copied().unwrap_or(0))
            .collect()
    }

    fn check_inputs(&self, image: &ImageFeatures, caption: &DenseCaption) -> Result<()> {
        if caption.is_empty() {
            return Err(Error::InvalidInput("cannot score an empty caption".into()));
        }
        if image.dim() != self.arch.feature_dim || image.num_objects() == 0 {
            return Err(Error::InvalidInput(format!(
                "image {} has {} objects of dim {}, model expects dim {}",
                image.image_id,
                image.num_objects(),
                image.dim(),
                self.arch.feature_dim
            )));
        }
        Ok(())
    }

    /// Records the logit computation on `g` with parameters bound at `vars`.
    pub(crate) fn logit_on(
        &self,
        g: &mut Graph,
        vars: &[Var],
        image: &ImageFeatures,
        caption: &DenseCaption,
    ) -> Result<Var> {
        self.check_inputs(image, caption)?;
        let s = self.slots();
        let ids = self.token_ids(caption);

        let x0 = g.gather(vars[s.tok_emb], &ids);
        let sa = self.attention(g, vars, s.sa, x0, x0);
        let x1 = g.add(x0, sa);

        let feats = g.leaf(Matrix::from_rows(&image.vectors));
        let proj = g.matmul(feats, vars[s.vis_w]);
        let objects = g.add_row(proj, vars[s.vis_b]);
        let objects = g.concat_rows(&[objects, vars[s.vis_null]]);
        let ca = self.attention(g, vars, s.ca, x1, objects);
        let x2 = g.add(x1, ca);

        let pooled = g.mean_rows(x2);
        let h = g.matmul(pooled, vars[s.head_w1]);
        let h = g.add_row(h, vars[s.head_b1]);
        let h = g.relu(h);
        let z = g.matmul(h, vars[s.head_w2]);
        Ok(g.add(z, vars[s.head_b2]))
    }

    /// Multi-head scaled dot-product attention from `queries` onto `keys`.
    fn attention(&self, g: &mut Graph, vars: &[Var], w: [usize; 4], queries: Var, keys: Var) -> Var {
        let q = g.matmul(queries, vars[w[0]]);
        let k = g.matmul(keys, vars[w[1]]);
        let v = g.matmul(keys, vars[w[2]]);
        let dh = self.arch.d_model / self.arch.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.arch.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                g.matmul(attn, vh)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        g.matmul(cat, vars[w[3]])
    }

    /// Pre-sigmoid score.
    pub fn logit(&self, image: &ImageFeatures, caption: &DenseCaption) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let z = self.logit_on(&mut g, &vars, image, caption)?;
        Ok(g.value(z).item())
    }

    /// Entailment score in (0, 1).
    pub fn score(&self, image: &ImageFeatures, caption: &DenseCaption) -> Result<f64> {
        self.logit(image, caption).map(sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::combine_c;

    fn image(seed: u64) -> ImageFeatures {
        let mut rng = seeded(seed);
        ImageFeatures {
            image_id: format!("i{seed}"),
            vectors: (0..6).map(|_| (0..24).map(|_| rng.gen::<f64>()).collect()).collect(),
        }
    }

    fn vocab() -> Vec<String> {
        [UNK, "?", "ball", "color", "is", "red", "the", "what"].map(String::from).to_vec()
    }

    fn caption(q: &str, a: &str) -> DenseCaption {
        let toks: Vec<String> = q.split_whitespace().map(String::from).collect();
        combine_c(&toks, a).unwrap()
    }

    #[test]
    fn zero_head_scores_one_half() {
        let mut m = VeModel::new(VeArch::default(), vocab(), 3).unwrap();
        m.zero_head();
        for s in 0..5 {
            let c = caption("what color is the ball ?", "red");
            assert_eq!(m.score(&image(s), &c).unwrap(), 0.5);
        }
    }

    #[test]
    fn scoring_is_pure_and_bounded() {
        let m = VeModel::new(VeArch::default(), vocab(), 4).unwrap();
        let c = caption("what color is the ball ?", "red");
        let a = m.score(&image(1), &c).unwrap();
        let b = m.score(&image(1), &c).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let m = VeModel::new(VeArch::default(), vocab(), 4).unwrap();
        let mut c = caption("what", "red");
        c.tokens.clear();
        assert!(m.score(&image(0), &c).is_err());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let m = VeModel::new(VeArch::default(), vocab(), 4).unwrap();
        let c = caption("What COLOR is the zebra?", "red");
        assert_eq!(m.token_ids(&c), vec![5, 7, 3, 4, 6, 0]);
        assert_eq!(text_key("?"), "?");
    }

    #[test]
    fn heads_must_divide_width() {
        let arch = VeArch {
            d_model: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(VeModel::new(arch, vocab(), 0).is_err());
    }
}
