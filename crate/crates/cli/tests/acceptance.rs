//! Acceptance checks. Each prints one PASS/FAIL line; the process exits
//! non-zero if any check fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use sar_cli::run_command;
use sar_core::captions::{build_captions, combine_c, combine_r, CategoryDict, Phase, StrategyPlan, C_MAX_TOKENS, R_MAX_TOKENS};
use sar_core::cas::{select_topn, topn_recall};
use sar_core::config::ExperimentConfig;
use sar_core::experiment::{candidate_sets, Experiment};
use sar_core::pipeline::{evaluate, EvalReport};
use sar_core::qtd::NPrimePolicy;
use sar_core::synthworld::{generate_world, QuestionType, WorldConfig};
use sar_core::captions::StrategyKind;
use sar_core::ve::{grad_check, loss_ssl, loss_total, loss_ve, text_vocabulary, GradScope, VeArch, VeModel};

const BENCHMARK: &str = include_str!("../../../configs/benchmark.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Neumaier-compensated sum.
fn precise_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn loss_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let t: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..=1) as f64 } else { rng.gen_range(0.0..=1.0) })
            .collect();
        let want_ve = precise_sum(z.iter().zip(&t).map(|(&z, &t)| t * softplus(-z) + (1.0 - t) * softplus(z))) / n as f64;
        let scores: Vec<f64> = z.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let alpha = rng.gen_range(0.0..2.0);
        let want_ssl = alpha * precise_sum(scores.iter().copied()) / n as f64;
        let got_ve = loss_ve(&z, &t).unwrap();
        let got_ssl = loss_ssl(&scores, alpha).unwrap();
        let got_total = loss_total(got_ve, got_ssl).unwrap();
        worst = worst
            .max(rel(got_ve, want_ve))
            .max(if want_ssl == 0.0 { got_ssl.abs() } else { rel(got_ssl, want_ssl) })
            .max(rel(got_total, want_ve + want_ssl));
    }
    let ln2_err = (loss_ve(&[0.0], &[1.0]).unwrap() - std::f64::consts::LN_2).abs();
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && ln2_err < 1e-12 && elapsed < Duration::from_secs(5),
        format!("max rel error {worst:.2e} (< 1e-9), |L(0,1) - ln 2| = {ln2_err:.1e} (< 1e-12), {elapsed:.2?}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let world = generate_world(&WorldConfig {
        num_images: 30,
        seed: 5,
        ..WorldConfig::default()
    })
    .unwrap();
    let dict = sar_core::captions::build_category_dict(&world.train).unwrap();
    let vocab = &world.train.answer_vocabulary;
    let cands: Vec<_> = world
        .train
        .examples
        .iter()
        .map(|ex| {
            let truth = ex.best_answer().to_string();
            let i = vocab.iter().position(|v| *v == truth).unwrap();
            sar_core::cas::CandidateSet {
                example_id: ex.id.clone(),
                entries: [truth, vocab[(i + 3) % vocab.len()].clone()]
                    .into_iter()
                    .enumerate()
                    .map(|(index, answer)| sar_core::cas::Candidate { index, answer, score: 0.0 })
                    .collect(),
            }
        })
        .collect();
    let data = build_captions(&world.train, &cands, StrategyPlan::R, Phase::Train, &dict).unwrap();
    let batch: Vec<_> = data.triples.iter().take(8).collect();
    let arch = VeArch {
        d_model: 16,
        hidden: 16,
        ..VeArch::default()
    };
    let model = VeModel::new(arch, text_vocabulary(&world.train), 3).unwrap();
    let full = grad_check(&model, &world.features, &batch, Some(1.0), 1e-4, GradScope::Full { per_tensor: 20 }, 0).unwrap();
    let head = grad_check(&model, &world.features, &batch, Some(1.0), 1e-4, GradScope::HeadOnly, 0).unwrap();
    let elapsed = start.elapsed();
    outcome(
        full.max_rel_error < 1e-4 && head.max_rel_error < 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "full model {:.2e} (< 1e-4, {} entries), dense head {:.2e} (< 1e-6), {elapsed:.2?}",
            full.max_rel_error,
            full.entries.len(),
            head.max_rel_error
        ),
    )
}

fn selection() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(3);
    let mut topn_bad = 0;
    for case in 0..1000 {
        let scores: Vec<f64> = (0..50)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                // Coarse grid on even cases to force ties.
                if case % 2 == 0 { (x * 4.0).round() / 4.0 } else { x }
            })
            .collect();
        let n = rng.gen_range(1..=50);
        let mut brute: Vec<usize> = (0..50).collect();
        brute.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        brute.truncate(n);
        if select_topn(&scores, n).unwrap() != brute {
            topn_bad += 1;
        }
    }
    let alphabet = ["what", "is", "how", "many", "there", "color"];
    let mut fmm_bad = 0;
    for _ in 0..1000 {
        let entries: Vec<String> = (0..rng.gen_range(1..=6))
            .map(|_| {
                (0..rng.gen_range(1..=3))
                    .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let question: Vec<String> = (0..rng.gen_range(0..=6))
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
            .collect();
        let dict = CategoryDict::new(&entries).unwrap();
        let brute = entries
            .iter()
            .filter(|e| {
                let toks: Vec<&str> = e.split_whitespace().collect();
                toks.len() <= question.len() && toks.iter().zip(&question).all(|(a, b)| a == b)
            })
            .max_by_key(|e| e.split_whitespace().count())
            .cloned();
        if dict.fmm_match(&question) != brute {
            fmm_bad += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        topn_bad == 0 && fmm_bad == 0 && elapsed < Duration::from_secs(5),
        format!("top-n mismatches {topn_bad}/1000, fmm mismatches {fmm_bad}/1000, {elapsed:.2?}"),
    )
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn combination(bench: &Bench) -> Outcome {
    let q1 = toks("How many flowers in the vase?");
    let q2 = toks("Is this a crosswalk?");
    let got = [
        combine_r(&q1, "how many", "8").unwrap().text(),
        combine_r(&q2, "is this", "No").unwrap().text(),
        combine_c(&q1, "8").unwrap().text(),
        combine_c(&q2, "No").unwrap().text(),
    ];
    let want = [
        "8 flowers in the vase",
        "No a crosswalk",
        "8 How many flowers in the vase?",
        "No Is this a crosswalk?",
    ];
    let exact = got.iter().zip(&want).filter(|(g, w)| g == w).count();
    let e = &bench.exp;
    let split = &e.world.test_shifted;
    let cands = candidate_sets(e.cas.as_ref(), split, &e.world.features, e.config.n).unwrap();
    let longest = |plan| {
        build_captions(split, &cands, plan, Phase::Train, &e.dict)
            .unwrap()
            .triples
            .iter()
            .map(|t| t.caption.len())
            .max()
            .unwrap()
    };
    let (r_max, c_max) = (longest(StrategyPlan::R), longest(StrategyPlan::C));
    outcome(
        exact == 4 && r_max <= R_MAX_TOKENS && c_max <= C_MAX_TOKENS,
        format!("{exact}/4 worked examples byte-exact, longest R caption {r_max} (<= {R_MAX_TOKENS}), longest C caption {c_max} (<= {C_MAX_TOKENS})"),
    )
}

struct Bench {
    exp: Experiment,
    cas_only: EvalReport,
    sar: EvalReport,
    elapsed: Duration,
}

fn benchmark() -> Bench {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml(BENCHMARK).unwrap();
    let exp = Experiment::prepare(cfg).unwrap();
    let scorer = exp.scorer(StrategyKind::R, false).unwrap();
    let (test, iid, f) = (&exp.world.test_shifted, &exp.world.val_iid, &exp.world.features);
    let cas_only = evaluate(&exp.cas_only(), test, f, Some(iid)).unwrap();
    let sar = evaluate(&exp.sar(&scorer.0, StrategyPlan::R_TO_C, exp.config.policy), test, f, Some(iid)).unwrap();
    let elapsed = start.elapsed();
    Bench { exp, cas_only, sar, elapsed }
}

fn debiasing(b: &Bench) -> Outcome {
    let w = &b.exp.world;
    let lift = b.sar.accuracy_all - b.cas_only.accuracy_all;
    let (g_sar, g_cas) = (b.sar.gap.unwrap(), b.cas_only.gap.unwrap());
    outcome(
        lift >= 0.05 && g_sar < g_cas && b.elapsed < Duration::from_secs(300),
        format!(
            "{} train / {} test: SAR(RtoC) {:.3} vs CAS-only {:.3} (lift {:+.3}, >= 0.05), GAP {:.3} vs {:.3}, {:.1?}",
            w.train.len(),
            w.test_shifted.len(),
            b.sar.accuracy_all,
            b.cas_only.accuracy_all,
            lift,
            g_sar,
            g_cas,
            b.elapsed
        ),
    )
}

fn recall_curve(b: &Bench) -> Outcome {
    let e = &b.exp;
    let a = e.cas.answer_vocabulary().len();
    let ns: Vec<usize> = (1..=a).collect();
    let curve = topn_recall(e.cas.as_ref(), &e.world.test_shifted, &e.world.features, &ns).unwrap();
    let values: Vec<f64> = curve.values().copied().collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    let (r1, r6, ra) = (curve[&1], curve[&6], curve[&a]);
    outcome(
        monotone && ra == 1.0 && r6 - r1 > 0.0,
        format!("monotone {monotone}, recall(1) {r1:.3}, recall(6) {r6:.3}, recall({a}) {ra:.3}"),
    )
}

fn qtd_accuracy(b: &Bench) -> Outcome {
    let cv = b.exp.qtd_cv_accuracy;
    outcome(cv >= 0.99, format!("5-fold CV accuracy {cv:.4} (>= 0.99)"))
}

fn degeneracy(b: &Bench) -> Outcome {
    let e = &b.exp;
    let scorer = e.scorer(StrategyKind::R, false).unwrap();
    let sar = e.sar(&scorer.0, StrategyPlan::R_TO_C, NPrimePolicy::new(1, 1));
    let mut total = 0;
    let mut mismatches = 0;
    for split in [&e.world.test_shifted, &e.world.val_iid] {
        let preds = sar.predict_all(&split.examples, &e.world.features).unwrap();
        for (p, ex) in preds.iter().zip(&split.examples) {
            let top1 = &e.cas.select(ex, &e.world.features, 1).unwrap().entries[0].answer;
            total += 1;
            mismatches += usize::from(&p.chosen_answer != top1);
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/{total} predictions differ from selector top-1"))
}

const SMALL: &str = r#"
N = 4
output_dir = "ignored"
[world]
num_images = 120
[cas]
epochs = 5
[ve]
epochs = 2
[ve.arch]
d_model = 8
hidden = 8
[qtd]
epochs = 1
[policy]
n_prime_yes_no = 2
n_prime_other = 4
[sweep]
yes_no = [1, 2]
other = [1, 2, 3, 4]
"#;

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Every command once, writing under `root`.
fn all_commands(root: &Path, cfg: &Path) -> Vec<i32> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (c, data) = (s(cfg), s(&root.join("data")));
    let (cas, qtd, ve) = (s(&root.join("cas.model")), s(&root.join("qtd.model")), s(&root.join("ve.model")));
    let report = s(&root.join("report.json"));
    let exp = s(&root.join("exp"));
    let gc = s(&root.join("grad.json"));
    let runs: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--config", &c, "--seed", "7", "--out", &data],
        vec!["train-cas", "--config", &c, "--data", &data, "--out", &cas],
        vec!["train-qtd", "--config", &c, "--data", &data, "--out", &qtd],
        vec!["train-ve", "--config", &c, "--data", &data, "--cas", &cas, "--strategy", "RtoC", "--N", "4", "--ssl", "--out", &ve],
        vec!["eval", "--config", &c, "--data", &data, "--cas", &cas, "--ve", &ve, "--qtd", &qtd, "--strategy", "RtoC", "--report", &report],
        vec!["ablate", "--config", &c, "--out", &exp],
        vec!["sweep", "--config", &c, "--out", &exp],
        vec!["grad-check", "--per-tensor", "3", "--out", &gc],
    ];
    runs.into_iter()
        .map(|args| run_command(std::iter::once("sar").chain(args)))
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let codes_a = all_commands(&a, &cfg);
    let codes_b = all_commands(&b, &cfg);
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let ok_codes = codes_a.iter().chain(&codes_b).all(|&c| c == 0);
    outcome(
        ok_codes && ta.len() == tb.len() && differing.is_empty(),
        format!("{} files per run, exit codes {codes_a:?}, differing files {differing:?}", ta.len()),
    )
}

fn sweep_shape(b: &Bench) -> Outcome {
    let curve = b.exp.sweep().unwrap();
    let series = curve.series(QuestionType::NonYesNo);
    let (first, last) = (series[0].1, series[series.len() - 1].1);
    let (peak_n, peak) = series[1..series.len() - 1]
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best });
    let text: Vec<String> = series.iter().map(|(n, a)| format!("{n}:{a:.3}")).collect();
    outcome(
        peak > first && peak > last,
        format!("non-yes/no peak {peak:.3} at N'={peak_n}; curve {}", text.join(" ")),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "loss oracle", loss_oracle());
    report(2, "gradient correctness", gradients());
    report(3, "selection oracle", selection());
    let bench = benchmark();
    report(4, "combination fidelity", combination(&bench));
    report(5, "debiasing on shifted priors", debiasing(&bench));
    report(6, "selector recall curve", recall_curve(&bench));
    report(7, "question type discriminator", qtd_accuracy(&bench));
    report(8, "degenerate policy equals selector", degeneracy(&bench));
    report(9, "determinism", determinism());
    report(10, "candidate count sweep shape", sweep_shape(&bench));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
