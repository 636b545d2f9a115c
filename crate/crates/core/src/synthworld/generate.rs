use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    DatasetSplit, FeatureStore, ImageFeatures, QuestionType, SplitName, VqaExample, WorldConfig,
};
use crate::error::Result;
use crate::rng::substream;

const NOISE_AMPLITUDE: f64 = 0.05;
const ANNOTATORS: usize = 10;
const ANNOTATOR_AGREEMENT: f64 = 0.75;
const EXTRA_QUESTION_TRIES: usize = 64;
const MAJORITY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    WhatColor,
    HowMany,
    IsThere,
    IsThis,
    AreThere,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::WhatColor,
        Category::HowMany,
        Category::IsThere,
        Category::IsThis,
        Category::AreThere,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Category::WhatColor => "what color",
            Category::HowMany => "how many",
            Category::IsThere => "is there",
            Category::IsThis => "is this",
            Category::AreThere => "are there",
        }
    }

    pub fn question_type(self) -> QuestionType {
        match self {
            Category::WhatColor | Category::HowMany => QuestionType::NonYesNo,
            _ => QuestionType::YesNo,
        }
    }

    /// Answer labels a question of this category can take.
    pub fn support(self, cfg: &WorldConfig) -> Vec<String> {
        match self {
            Category::WhatColor => cfg.colors.clone(),
            Category::HowMany => (0..=cfg.count_support()).map(|n| n.to_string()).collect(),
            _ => vec!["yes".into(), "no".into()],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Object {
    ty: usize,
    color: usize,
}

#[derive(Debug, Clone, Copy)]
enum Template {
    WhatColor { ty: usize },
    HowMany { ty: usize },
    IsThere { ty: usize, color: usize },
    IsThis { ty: usize, color: usize },
    AreThere { ty: usize },
}

impl Template {
    fn category(self) -> Category {
        match self {
            Template::WhatColor { .. } => Category::WhatColor,
            Template::HowMany { .. } => Category::HowMany,
            Template::IsThere { .. } => Category::IsThere,
            Template::IsThis { .. } => Category::IsThis,
            Template::AreThere { .. } => Category::AreThere,
        }
    }

    fn all_for(cat: Category, cfg: &WorldConfig) -> Vec<Template> {
        let types = 0..cfg.object_types.len();
        let pairs = || {
            (0..cfg.object_types.len())
                .flat_map(|ty| (0..cfg.colors.len()).map(move |color| (ty, color)))
        };
        match cat {
            Category::WhatColor => types.map(|ty| Template::WhatColor { ty }).collect(),
            Category::HowMany => types.map(|ty| Template::HowMany { ty }).collect(),
            Category::AreThere => types.map(|ty| Template::AreThere { ty }).collect(),
            Category::IsThere => pairs().map(|(ty, color)| Template::IsThere { ty, color }).collect(),
            Category::IsThis => pairs().map(|(ty, color)| Template::IsThis { ty, color }).collect(),
        }
    }

    fn tokens(self, cfg: &WorldConfig) -> Vec<String> {
        let t = |i: usize| cfg.object_types[i].as_str();
        let c = |i: usize| cfg.colors[i].as_str();
        let text = match self {
            Template::WhatColor { ty } => format!("what color is the {} ?", t(ty)),
            Template::HowMany { ty } => format!("how many {} are there ?", t(ty)),
            Template::IsThere { ty, color } => format!("is there a {} {} ?", c(color), t(ty)),
            Template::IsThis { ty, color } => format!("is this {} {} ?", t(ty), c(color)),
            Template::AreThere { ty } => format!("are there any {} ?", t(ty)),
        };
        text.split_whitespace().map(String::from).collect()
    }

    /// Ground-truth answer on a set of objects, or `None` when the question
    /// presupposes a unique object that the image does not have.
    fn answer(self, objects: &[Object]) -> Option<String> {
        let of_type = |ty: usize| objects.iter().filter(move |o| o.ty == ty);
        let yes_no = |b: bool| Some(if b { "yes" } else { "no" }.to_string());
        match self {
            Template::WhatColor { ty } => {
                let mut it = of_type(ty);
                match (it.next(), it.next()) {
                    (Some(o), None) => Some(o.color.to_string()),
                    _ => None,
                }
            }
            Template::HowMany { ty } => Some(of_type(ty).count().to_string()),
            Template::IsThere { ty, color } => {
                yes_no(objects.iter().any(|o| o.ty == ty && o.color == color))
            }
            Template::IsThis { ty, color } => {
                let mut it = of_type(ty);
                match (it.next(), it.next()) {
                    (Some(o), None) => yes_no(o.color == color),
                    _ => None,
                }
            }
            Template::AreThere { ty } => yes_no(of_type(ty).next().is_some()),
        }
    }

    /// Same as [`Template::answer`] but with colors rendered as labels.
    fn answer_label(self, objects: &[Object], cfg: &WorldConfig) -> Option<String> {
        let raw = self.answer(objects)?;
        Some(match self {
            Template::WhatColor { .. } => cfg.colors[raw.parse::<usize>().ok()?].clone(),
            _ => raw,
        })
    }
}

/// Object attributes recovered from a feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedObject {
    pub object_type: String,
    pub color: String,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Reads the one-hot type and color blocks of one object row.
pub fn decode_object(row: &[f64], cfg: &WorldConfig) -> DecodedObject {
    let nt = cfg.object_types.len();
    let nc = cfg.colors.len();
    DecodedObject {
        object_type: cfg.object_types[argmax(&row[..nt])].clone(),
        color: cfg.colors[argmax(&row[nt..nt + nc])].clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub features: FeatureStore,
    pub train: DatasetSplit,
    pub test_shifted: DatasetSplit,
    pub val_iid: DatasetSplit,
}

impl World {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::TestShifted => &self.test_shifted,
            SplitName::ValIid => &self.val_iid,
        }
    }

    pub fn vocab_hash(&self) -> String {
        self.train.vocab_hash()
    }
}

/// Per-category answer distributions for one split.
struct AnswerPrior {
    support: Vec<String>,
    weights: WeightedIndex<f64>,
}

impl AnswerPrior {
    fn new(support: Vec<String>, majority: usize, skew: f64) -> Self {
        let n = support.len();
        let major = skew.max(1.0 / n as f64);
        let rest = if n > 1 { (1.0 - major) / (n - 1) as f64 } else { 0.0 };
        let w: Vec<f64> = (0..n).map(|i| if i == majority { major } else { rest }).collect();
        AnswerPrior {
            support,
            weights: WeightedIndex::new(w).expect("valid answer weights"),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> &str {
        &self.support[self.weights.sample(rng)]
    }
}

struct Priors {
    train: BTreeMap<Category, AnswerPrior>,
    shifted: BTreeMap<Category, AnswerPrior>,
}

impl Priors {
    fn new(cfg: &WorldConfig) -> Self {
        let mut rng = substream(cfg.seed, MAJORITY_STREAM);
        let mut train = BTreeMap::new();
        let mut shifted = BTreeMap::new();
        for cat in Category::ALL {
            let support = cat.support(cfg);
            let n = support.len();
            let major = rng.gen_range(0..n);
            // Half-way round the support, so the shifted majority always differs.
            let shifted_major = (major + n / 2) % n;
            train.insert(cat, AnswerPrior::new(support.clone(), major, cfg.prior_skew));
            shifted.insert(cat, AnswerPrior::new(support, shifted_major, cfg.prior_skew));
        }
        Priors { train, shifted }
    }

    fn for_split(&self, split: SplitName) -> &BTreeMap<Category, AnswerPrior> {
        match split {
            SplitName::TestShifted => &self.shifted,
            SplitName::Train | SplitName::ValIid => &self.train,
        }
    }
}

fn other_type(ty: usize, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> usize {
    let n = cfg.object_types.len();
    (ty + rng.gen_range(1..n)) % n
}

fn other_color(color: usize, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> usize {
    let n = cfg.colors.len();
    (color + rng.gen_range(1..n)) % n
}

/// Builds a set of objects for which `template` has answer `answer`.
fn build_objects(
    cat: Category,
    answer: &str,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> (Template, Vec<Object>) {
    let k = cfg.objects_per_image;
    let nt = cfg.object_types.len();
    let nc = cfg.colors.len();
    let ty = rng.gen_range(0..nt);
    let color = rng.gen_range(0..nc);
    let yes = answer == "yes";
    let mut objs: Vec<Object> = Vec::with_capacity(k);
    let fill_without_type = |objs: &mut Vec<Object>, rng: &mut ChaCha8Rng| {
        while objs.len() < k {
            let t = other_type(ty, cfg, rng);
            objs.push(Object {
                ty: t,
                color: rng.gen_range(0..nc),
            });
        }
    };
    let template = match cat {
        Category::WhatColor => {
            let c = cfg.colors.iter().position(|c| c == answer).expect("color answer");
            objs.push(Object { ty, color: c });
            fill_without_type(&mut objs, rng);
            Template::WhatColor { ty }
        }
        Category::HowMany => {
            let n: usize = answer.parse().expect("count answer");
            for _ in 0..n {
                objs.push(Object {
                    ty,
                    color: rng.gen_range(0..nc),
                });
            }
            fill_without_type(&mut objs, rng);
            Template::HowMany { ty }
        }
        Category::IsThere => {
            if yes {
                objs.push(Object { ty, color });
            }
            while objs.len() < k {
                let o = Object {
                    ty: rng.gen_range(0..nt),
                    color: rng.gen_range(0..nc),
                };
                if yes || o.ty != ty || o.color != color {
                    objs.push(o);
                }
            }
            Template::IsThere { ty, color }
        }
        Category::IsThis => {
            let actual = if yes { color } else { other_color(color, cfg, rng) };
            objs.push(Object { ty, color: actual });
            fill_without_type(&mut objs, rng);
            Template::IsThis { ty, color }
        }
        Category::AreThere => {
            if yes {
                let m = rng.gen_range(1..=k.min(2));
                for _ in 0..m {
                    objs.push(Object {
                        ty,
                        color: rng.gen_range(0..nc),
                    });
                }
            }
            fill_without_type(&mut objs, rng);
            Template::AreThere { ty }
        }
    };
    objs.shuffle(rng);
    (template, objs)
}

fn encode_objects(objs: &[Object], cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let nt = cfg.object_types.len();
    let nc = cfg.colors.len();
    objs.iter()
        .map(|o| {
            let mut v = vec![0.0; cfg.feature_dim];
            v[o.ty] = 1.0;
            v[nt + o.color] = 1.0;
            v[nt + nc] = rng.gen::<f64>();
            v[nt + nc + 1] = rng.gen::<f64>();
            for x in &mut v[nt + nc + 2..] {
                *x = rng.gen_range(0.0..NOISE_AMPLITUDE);
            }
            v
        })
        .collect()
}

fn soft_targets(
    answer: &str,
    cat: Category,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, f64> {
    if !cfg.soft_targets {
        return BTreeMap::from([(answer.to_string(), 1.0)]);
    }
    let support = cat.support(cfg);
    let others: Vec<&String> = support.iter().filter(|a| *a != answer).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..ANNOTATORS {
        let said = if rng.gen_bool(ANNOTATOR_AGREEMENT) || others.is_empty() {
            answer.to_string()
        } else {
            others[rng.gen_range(0..others.len())].clone()
        };
        *counts.entry(said).or_default() += 1;
    }
    counts.entry(answer.to_string()).or_insert(1);
    counts
        .into_iter()
        .map(|(a, n)| {
            let t = match n {
                1 => 0.3,
                2 => 0.6,
                3 => 0.9,
                _ => 1.0,
            };
            (a, t)
        })
        .collect()
}

fn make_example(
    id: String,
    image_id: &str,
    template: Template,
    answer: &str,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> VqaExample {
    let cat = template.category();
    VqaExample {
        id,
        image_id: image_id.to_string(),
        question: template.tokens(cfg),
        question_category: cat.prefix().to_string(),
        question_type: cat.question_type(),
        answer_targets: soft_targets(answer, cat, cfg, rng),
    }
}

fn split_of(index: usize, cfg: &WorldConfig) -> SplitName {
    let n = cfg.num_images as f64;
    let n_train = (n * cfg.train_fraction).round() as usize;
    let n_test = (n * cfg.test_fraction).round() as usize;
    if index < n_train {
        SplitName::Train
    } else if index < n_train + n_test {
        SplitName::TestShifted
    } else {
        SplitName::ValIid
    }
}

/// Generates images and the three splits. Output depends only on `cfg`:
/// every image draws from its own random substream.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let priors = Priors::new(cfg);
    let vocab = cfg.answer_vocabulary();
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut splits: BTreeMap<SplitName, Vec<VqaExample>> = BTreeMap::new();
    let categories = Category::ALL;

    for index in 0..cfg.num_images {
        let mut rng = substream(cfg.seed, index as u64);
        let split = split_of(index, cfg);
        let prior = priors.for_split(split);
        let image_id = format!("img{index:06}");
        let examples = splits.entry(split).or_default();

        let cat = *categories.choose(&mut rng).expect("categories");
        let answer = prior[&cat].sample(&mut rng).to_string();
        let (template, objs) = build_objects(cat, &answer, cfg, &mut rng);
        let mut qa = vec![(template, answer)];

        for _ in 1..cfg.questions_per_image {
            for _ in 0..EXTRA_QUESTION_TRIES {
                let cat = *categories.choose(&mut rng).expect("categories");
                let want = prior[&cat].sample(&mut rng).to_string();
                let fits: Vec<Template> = Template::all_for(cat, cfg)
                    .into_iter()
                    .filter(|t| t.answer_label(&objs, cfg).as_deref() == Some(want.as_str()))
                    .collect();
                if let Some(t) = fits.choose(&mut rng) {
                    qa.push((*t, want));
                    break;
                }
            }
        }

        for (template, answer) in qa {
            debug_assert_eq!(template.answer_label(&objs, cfg).as_deref(), Some(answer.as_str()));
            let id = format!("{}-{:06}", split.as_str(), examples.len());
            examples.push(make_example(id, &image_id, template, &answer, cfg, &mut rng));
        }
        let vectors = encode_objects(&objs, cfg, &mut rng);
        images.push(ImageFeatures { image_id, vectors });
    }

    let mut take = |name: SplitName| DatasetSplit {
        name,
        examples: splits.remove(&name).unwrap_or_default(),
        answer_vocabulary: vocab.clone(),
    };
    Ok(World {
        config: cfg.clone(),
        train: take(SplitName::Train),
        test_shifted: take(SplitName::TestShifted),
        val_iid: take(SplitName::ValIid),
        features: FeatureStore::new(images)?,
    })
}
