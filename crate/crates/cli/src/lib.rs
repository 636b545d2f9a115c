//! The `sar` command line. [`run_command`] holds everything so tests can
//! drive it without spawning a process.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for configuration or
//! invariant violations, 1 for anything else. Errors go to stderr as a
//! single JSON line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sar_core::captions::{build_captions, build_category_dict, Phase, StrategyPlan};
use sar_core::cas::{config_hash, load_cas, save_cas, train_cas, Candidate, CandidateSet};
use sar_core::config::{load_config, ExperimentConfig};
use sar_core::experiment::{train_scorer, Experiment};
use sar_core::pipeline::{evaluate, Sar};
use sar_core::qtd::{load_qtd, save_qtd, train_qtd, NPrimePolicy};
use sar_core::synthworld::{generate_world, read_world, vocab_hash, write_world, SplitName, World};
use sar_core::ve::{grad_check, load_ve, save_ve, text_vocabulary, GradScope, VeMeta, VeModel};
use sar_core::{Error, TOOL_VERSION};

#[derive(Parser)]
#[command(name = "sar", version, about = "Select-and-rerank visual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train the candidate answer selector.
    TrainCas(TrainCas),
    /// Train the question type discriminator.
    TrainQtd(TrainQtd),
    /// Train the entailment scorer on selector candidates.
    TrainVe(TrainVe),
    /// Evaluate a selector, optionally with a scorer, on one split.
    Eval(Eval),
    /// Train and evaluate every ablation configuration.
    Ablate(Experimental),
    /// Accuracy per question type over a range of candidate counts.
    Sweep(Experimental),
    /// Compare analytic scorer gradients with finite differences.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    soft_targets: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCas {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long = "nprime-yesno")]
    nprime_yesno: Option<usize>,
    #[arg(long = "nprime-other")]
    nprime_other: Option<usize>,
}

impl PolicyArgs {
    fn apply(&self, base: NPrimePolicy) -> NPrimePolicy {
        NPrimePolicy::new(
            self.nprime_yesno.unwrap_or(base.n_prime_yes_no),
            self.nprime_other.unwrap_or(base.n_prime_other),
        )
    }
}

#[derive(Args)]
struct TrainQtd {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct TrainVe {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cas: PathBuf,
    /// R, C or RtoC. RtoC trains on R captions.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    ssl: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file; the loss curve goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cas: Option<PathBuf>,
    #[arg(long)]
    ve: Option<PathBuf>,
    #[arg(long)]
    qtd: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[command(flatten)]
    policy: PolicyArgs,
    /// train, test_shifted or val_iid.
    #[arg(long, default_value = "test_shifted")]
    split: String,
    /// Report file; the recall curve goes next to it as `<stem>.recall.csv`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Experimental {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheck {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Parameters sampled per tensor.
    #[arg(long, default_value_t = 20)]
    per_tensor: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Include the mismatched-pair penalty with this weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Check only the dense head.
    #[arg(long)]
    head_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }

    fn to_json_line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Config(m) => ("config", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        json!({ "error": kind, "message": msg }).to_string()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("usage error");
            let f = Failure::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", f.to_json_line());
            return f.code();
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            f.code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<Value> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainCas(a) => train_cas_cmd(a),
        Command::TrainQtd(a) => train_qtd_cmd(a),
        Command::TrainVe(a) => train_ve_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn config_of(arg: &ConfigArg) -> CliResult<ExperimentConfig> {
    Ok(match &arg.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    })
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| Failure::from(Error::io(p, e)))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Pretty JSON with provenance around `body`.
fn envelope(kind: &str, config_hash: &str, seed: u64, body: Value) -> String {
    let v = json!({
        "kind": kind,
        "tool_version": TOOL_VERSION,
        "config_hash": config_hash,
        "seed": seed,
        "report": body,
    });
    serde_json::to_string_pretty(&v).expect("json values serialize") + "\n"
}

/// CSV preceded by one `#` line of provenance.
fn csv_with_provenance(config_hash: &str, seed: u64, csv: &str) -> String {
    format!("# tool_version={TOOL_VERSION} config_hash={config_hash} seed={seed}\n{csv}")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parse_plan(s: Option<&str>, default: StrategyPlan) -> CliResult<StrategyPlan> {
    match s {
        Some(s) => Ok(s.parse::<StrategyPlan>()?),
        None => Ok(default),
    }
}

fn check_vocab(world: &World, found: &str, what: &str) -> CliResult<()> {
    let expected = world.vocab_hash();
    if expected != found {
        return Err(Failure::Config(format!(
            "{what} was built for a different answer vocabulary ({found} != {expected})"
        )));
    }
    Ok(())
}

fn gen_data(a: GenData) -> CliResult<Value> {
    let mut cfg = config_of(&a.config)?;
    if let Some(s) = a.seed {
        cfg.world.seed = s;
    }
    if a.soft_targets {
        cfg.world.soft_targets = true;
    }
    let world = generate_world(&cfg.world)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::io(&a.out, e)))?;
    write_world(&world, &a.out)?;
    Ok(json!({
        "command": "gen-data",
        "out": a.out.display().to_string(),
        "train": world.train.len(),
        "test_shifted": world.test_shifted.len(),
        "val_iid": world.val_iid.len(),
    }))
}

fn train_cas_cmd(a: TrainCas) -> CliResult<Value> {
    let mut cfg = config_of(&a.config)?.cas;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let world = read_world(&a.data)?;
    let (model, report) = train_cas(&world.train, &world.features, &cfg)?;
    ensure_parent(&a.out)?;
    save_cas(model.as_ref(), &cfg, &a.out)?;
    Ok(json!({
        "command": "train-cas",
        "out": a.out.display().to_string(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
    }))
}

fn train_qtd_cmd(a: TrainQtd) -> CliResult<Value> {
    let exp = config_of(&a.config)?;
    let mut cfg = exp.qtd.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let policy = a.policy.apply(exp.policy);
    policy.validate(exp.n)?;
    let world = read_world(&a.data)?;
    let (model, cv) = train_qtd(&world.train, &cfg)?;
    ensure_parent(&a.out)?;
    save_qtd(&model, &cfg, cv, &a.out)?;
    Ok(json!({
        "command": "train-qtd",
        "out": a.out.display().to_string(),
        "cv_accuracy": cv,
        "policy": { "n_prime_yes_no": policy.n_prime_yes_no, "n_prime_other": policy.n_prime_other },
    }))
}

fn train_ve_cmd(a: TrainVe) -> CliResult<Value> {
    let mut exp = config_of(&a.config)?;
    exp.plan = parse_plan(a.strategy.as_deref(), exp.plan)?;
    if let Some(n) = a.n {
        exp.n = n;
    }
    let ve = &mut exp.ve;
    ve.ssl_enabled |= a.ssl;
    if let Some(x) = a.alpha {
        ve.alpha = x;
    }
    if let Some(x) = a.epochs {
        ve.epochs = x;
    }
    if let Some(x) = a.lr {
        ve.lr = x;
    }
    if let Some(x) = a.seed {
        ve.seed = x;
    }
    exp.validate()?;
    let world = read_world(&a.data)?;
    let cas = load_cas(&a.cas)?;
    check_vocab(&world, &vocab_hash(cas.answer_vocabulary()), "the selector")?;
    let dict = build_category_dict(&world.train)?;
    let (model, curve) = train_scorer(cas.as_ref(), &world.train, &world.features, &dict, exp.plan, exp.n, &exp.ve)?;
    let hash = config_hash(&exp.ve)?;
    let meta = VeMeta {
        seed: exp.ve.seed,
        config_hash: hash.clone(),
        vocab_hash: world.vocab_hash(),
        plan: exp.plan,
        trained_n: exp.n,
    };
    ensure_parent(&a.out)?;
    save_ve(&model, &meta, &a.out)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    let curve_path = sibling(&a.out, "loss.csv");
    write_text(&curve_path, &csv_with_provenance(&hash, exp.ve.seed, &csv))?;
    Ok(json!({
        "command": "train-ve",
        "out": a.out.display().to_string(),
        "loss_curve": curve_path.display().to_string(),
        "final_loss": curve.last(),
    }))
}

fn eval_cmd(a: Eval) -> CliResult<Value> {
    let exp = config_of(&a.config)?;
    let Some(cas_path) = &a.cas else {
        return Err(Failure::Config(
            "missing required artifact: --cas <selector model>".into(),
        ));
    };
    let split_name = match a.split.as_str() {
        "train" => SplitName::Train,
        "test_shifted" | "test-shifted" => SplitName::TestShifted,
        "val_iid" | "val-iid" => SplitName::ValIid,
        other => return Err(Failure::Config(format!("unknown split `{other}`"))),
    };
    let world = read_world(&a.data)?;
    let cas = load_cas(cas_path)?;
    check_vocab(&world, &vocab_hash(cas.answer_vocabulary()), "the selector")?;
    let dict = build_category_dict(&world.train)?;
    let ve: Option<(VeModel, VeMeta)> = a.ve.as_deref().map(load_ve).transpose()?;
    let qtd = a.qtd.as_deref().map(load_qtd).transpose()?;
    let plan = parse_plan(a.strategy.as_deref(), exp.plan)?;
    let policy = a.policy.apply(exp.policy);

    let sar = match &ve {
        None => Sar::cas_only(cas.as_ref(), &dict),
        Some((model, meta)) => {
            check_vocab(&world, &meta.vocab_hash, "the scorer")?;
            if meta.plan.train() != plan.train() {
                return Err(Failure::Config(format!(
                    "scorer was trained with {} captions but plan {plan} needs {}",
                    meta.plan.train(),
                    plan.train()
                )));
            }
            policy.validate(meta.trained_n)?;
            if !policy.is_uniform() && qtd.is_none() {
                return Err(Failure::Config(
                    "missing required artifact: --qtd <question type model> (policy is not uniform)".into(),
                ));
            }
            Sar {
                cas: cas.as_ref(),
                ve: Some(model),
                qtd: qtd.as_ref().map(|(m, _)| m),
                dict: &dict,
                plan,
                policy,
                trained_n: meta.trained_n,
            }
        }
    };
    let iid = (split_name != SplitName::ValIid).then_some(&world.val_iid);
    let report = evaluate(&sar, world.split(split_name), &world.features, iid)?;

    let settings = json!({
        "split": split_name.as_str(),
        "plan": plan.name(),
        "policy": [policy.n_prime_yes_no, policy.n_prime_other],
        "cas_vocab": vocab_hash(cas.answer_vocabulary()),
        "ve_config": ve.as_ref().map(|(_, m)| m.config_hash.clone()),
        "world": world.vocab_hash(),
    });
    let hash = config_hash(&settings)?;
    let seed = world.config.seed;
    let body = json!({ "settings": settings, "evaluation": serde_json::to_value(&report).map_err(Error::from)? });
    write_text(&a.report, &envelope("eval", &hash, seed, body))?;
    let mut csv = String::from("n,recall\n");
    for (n, r) in &report.topn_recall_curve {
        csv.push_str(&format!("{n},{r}\n"));
    }
    write_text(&sibling(&a.report, "recall.csv"), &csv_with_provenance(&hash, seed, &csv))?;
    Ok(json!({
        "command": "eval",
        "report": a.report.display().to_string(),
        "accuracy_all": report.accuracy_all,
        "gap": report.gap,
    }))
}

fn experiment_of(a: &Experimental) -> CliResult<(Experiment, PathBuf, String)> {
    let cfg = load_config(&a.config)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let hash = config_hash(&cfg)?;
    Ok((Experiment::prepare(cfg)?, out, hash))
}

fn ablate_cmd(a: Experimental) -> CliResult<Value> {
    let (exp, out, hash) = experiment_of(&a)?;
    let table = exp.ablation()?;
    let path = out.join("ablation.json");
    let body = serde_json::to_value(&table).map_err(Error::from)?;
    write_text(&path, &envelope("ablation", &hash, exp.config.world.seed, body))?;
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|r| json!({ "name": r.name, "accuracy": r.report.accuracy_all, "delta": r.delta_vs_cas_only }))
        .collect();
    Ok(json!({ "command": "ablate", "out": path.display().to_string(), "rows": rows }))
}

fn sweep_cmd(a: Experimental) -> CliResult<Value> {
    let (exp, out, hash) = experiment_of(&a)?;
    let curve = exp.sweep()?;
    let seed = exp.config.world.seed;
    let csv_path = out.join("sweep.csv");
    write_text(&csv_path, &csv_with_provenance(&hash, seed, &curve.to_csv()))?;
    let json_path = out.join("sweep.json");
    let body = serde_json::to_value(&curve).map_err(Error::from)?;
    write_text(&json_path, &envelope("sweep", &hash, seed, body))?;
    Ok(json!({ "command": "sweep", "out": csv_path.display().to_string() }))
}

fn grad_check_cmd(a: GradCheck) -> CliResult<Value> {
    let mut cfg = config_of(&a.config)?;
    cfg.world.num_images = 12;
    cfg.world.seed = a.seed;
    let world = generate_world(&cfg.world)?;
    let dict = build_category_dict(&world.train)?;
    let vocab = &world.train.answer_vocabulary;
    let k = a.batch.clamp(1, world.train.len());
    let mut split = world.train.clone();
    split.examples.truncate(k);
    // The labelled answer and its vocabulary neighbour: one positive and one
    // negative caption per question.
    let cands: Vec<CandidateSet> = split
        .examples
        .iter()
        .map(|ex| {
            let truth = ex.best_answer().to_string();
            let pos = vocab.iter().position(|v| *v == truth).unwrap_or(0);
            let other = vocab[(pos + 1) % vocab.len()].clone();
            CandidateSet {
                example_id: ex.id.clone(),
                entries: [truth, other]
                    .into_iter()
                    .enumerate()
                    .map(|(index, answer)| Candidate { index, answer, score: 0.0 })
                    .collect(),
            }
        })
        .collect();
    let data = build_captions(&split, &cands, StrategyPlan::R, Phase::Train, &dict)?;
    let mut arch = cfg.ve.arch;
    arch.d_model = a.d_model;
    arch.hidden = a.d_model;
    arch.feature_dim = world.features.feature_dim();
    let model = VeModel::new(arch, text_vocabulary(&world.train), a.seed)?;
    let batch: Vec<_> = data.triples.iter().collect();
    let scope = if a.head_only {
        GradScope::HeadOnly
    } else {
        GradScope::Full { per_tensor: a.per_tensor }
    };
    let report = grad_check(&model, &world.features, &batch, a.alpha, a.epsilon, scope, a.seed)?;
    let worst = report
        .entries
        .iter()
        .max_by(|x, y| x.rel_error.total_cmp(&y.rel_error))
        .map(|e| json!({ "tensor": e.tensor, "index": e.index, "analytic": e.analytic, "numeric": e.numeric }));
    let summary = json!({
        "command": "grad-check",
        "scope": if a.head_only { "head_only" } else { "full" },
        "checked": report.entries.len(),
        "max_rel_error": report.max_rel_error,
        "worst": worst,
    });
    if let Some(out) = &a.out {
        let hash = config_hash(&json!({ "d_model": a.d_model, "epsilon": a.epsilon, "per_tensor": a.per_tensor, "batch": k }))?;
        write_text(out, &envelope("grad-check", &hash, a.seed, summary.clone()))?;
    }
    Ok(summary)
}
