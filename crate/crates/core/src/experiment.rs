//! Seeded end-to-end runs: data generation, training of every stage, and
//! the evaluation tables built on top.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::captions::{build_captions, build_category_dict, CaptionDataset, CategoryDict, Phase, StrategyKind, StrategyPlan};
use crate::cas::{train_cas, CandidateSelector, CandidateSet, CasTrainReport};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::pipeline::{ablate, sweep_n_prime, AblationTable, Sar, SweepCurve};
use crate::qtd::{train_qtd, NPrimePolicy, QtdModel};
use crate::synthworld::{generate_world, DatasetSplit, FeatureStore, World};
use crate::ve::{text_vocabulary, train_ve, VeModel, VeTrainConfig};

/// Top-`n` selector candidates for every example of `split`.
pub fn candidate_sets(
    cas: &dyn CandidateSelector,
    split: &DatasetSplit,
    features: &FeatureStore,
    n: usize,
) -> Result<Vec<CandidateSet>> {
    split.examples.iter().map(|ex| cas.select(ex, features, n)).collect()
}

/// Caption triples the scorer is trained on: the selector's top `n` for
/// each training question, captioned with the plan's training strategy.
pub fn scorer_training_set(
    cas: &dyn CandidateSelector,
    train: &DatasetSplit,
    features: &FeatureStore,
    dict: &CategoryDict,
    plan: StrategyPlan,
    n: usize,
) -> Result<CaptionDataset> {
    let cands = candidate_sets(cas, train, features, n)?;
    build_captions(train, &cands, plan, Phase::Train, dict)
}

/// Builds and trains a scorer. The input width follows `features`.
pub fn train_scorer(
    cas: &dyn CandidateSelector,
    train: &DatasetSplit,
    features: &FeatureStore,
    dict: &CategoryDict,
    plan: StrategyPlan,
    n: usize,
    cfg: &VeTrainConfig,
) -> Result<(VeModel, Vec<f64>)> {
    let data = scorer_training_set(cas, train, features, dict, plan, n)?;
    let mut arch = cfg.arch;
    arch.feature_dim = features.feature_dim();
    let model = VeModel::new(arch, text_vocabulary(train), cfg.seed)?;
    train_ve(model, &data, features, cfg)
}

type ScorerKey = (StrategyKind, bool);
/// A trained scorer with its per-epoch mean losses.
pub type TrainedScorer = Arc<(VeModel, Vec<f64>)>;

/// A generated world with its selector, category dictionary and question
/// type model. Scorers are trained on demand and cached.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: World,
    pub cas: Box<dyn CandidateSelector>,
    pub cas_report: CasTrainReport,
    pub dict: CategoryDict,
    pub qtd: QtdModel,
    pub qtd_cv_accuracy: f64,
    scorers: Mutex<BTreeMap<ScorerKey, TrainedScorer>>,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let world = generate_world(&config.world)?;
        let (cas, cas_report) = train_cas(&world.train, &world.features, &config.cas)?;
        let dict = build_category_dict(&world.train)?;
        let (qtd, qtd_cv_accuracy) = train_qtd(&world.train, &config.qtd)?;
        Ok(Experiment {
            config,
            world,
            cas,
            cas_report,
            dict,
            qtd,
            qtd_cv_accuracy,
            scorers: Mutex::new(BTreeMap::new()),
        })
    }

    /// Scorer trained with `kind` captions, with or without the mismatched
    /// pair penalty.
    pub fn scorer(&self, kind: StrategyKind, ssl: bool) -> Result<TrainedScorer> {
        if let Some(s) = self.scorers.lock().expect("scorer cache").get(&(kind, ssl)) {
            return Ok(s.clone());
        }
        let plan = match kind {
            StrategyKind::R => StrategyPlan::R,
            StrategyKind::C => StrategyPlan::C,
        };
        let cfg = VeTrainConfig {
            ssl_enabled: ssl,
            ..self.config.ve.clone()
        };
        let trained = Arc::new(train_scorer(
            self.cas.as_ref(),
            &self.world.train,
            &self.world.features,
            &self.dict,
            plan,
            self.config.n,
            &cfg,
        )?);
        self.scorers
            .lock()
            .expect("scorer cache")
            .insert((kind, ssl), trained.clone());
        Ok(trained)
    }

    pub fn cas_only(&self) -> Sar<'_> {
        Sar::cas_only(self.cas.as_ref(), &self.dict)
    }

    pub fn sar<'a>(&'a self, ve: &'a VeModel, plan: StrategyPlan, policy: NPrimePolicy) -> Sar<'a> {
        Sar {
            cas: self.cas.as_ref(),
            ve: Some(ve),
            qtd: Some(&self.qtd),
            dict: &self.dict,
            plan,
            policy,
            trained_n: self.config.n,
        }
    }

    /// Selector alone; scorer with each strategy plan and one candidate
    /// count for all questions; then per-type counts, without and with the
    /// mismatched-pair penalty.
    pub fn ablation(&self) -> Result<AblationTable> {
        let plan = self.config.plan;
        let policy = self.config.policy;
        let uniform = NPrimePolicy::new(policy.n_prime_other, policy.n_prime_other);
        let r = self.scorer(StrategyKind::R, false)?;
        let c = self.scorer(StrategyKind::C, false)?;
        let main = self.scorer(plan.train(), false)?;
        let ssl = self.scorer(plan.train(), true)?;
        let rows = vec![
            ("CAS-only".to_string(), self.cas_only()),
            ("CAS+VE(R)".to_string(), self.sar(&r.0, StrategyPlan::R, uniform)),
            ("CAS+VE(C)".to_string(), self.sar(&c.0, StrategyPlan::C, uniform)),
            ("CAS+VE(RtoC)".to_string(), self.sar(&r.0, StrategyPlan::R_TO_C, uniform)),
            (format!("CAS+VE+QTD({plan})"), self.sar(&main.0, plan, policy)),
            (format!("CAS+VE+SSL+QTD({plan})"), self.sar(&ssl.0, plan, policy)),
        ];
        ablate(&rows, &self.world.test_shifted, &self.world.features, Some(&self.world.val_iid))
    }

    /// Candidate-count sweep of the main configuration on the shifted split.
    pub fn sweep(&self) -> Result<SweepCurve> {
        let plan = self.config.plan;
        let scorer = self.scorer(plan.train(), false)?;
        let sar = self.sar(&scorer.0, plan, self.config.policy);
        sweep_n_prime(
            &sar,
            &self.world.test_shifted,
            &self.world.features,
            &self.config.sweep.yes_no,
            &self.config.sweep.other,
        )
    }
}
