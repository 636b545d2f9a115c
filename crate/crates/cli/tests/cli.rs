use std::fs;
use std::path::{Path, PathBuf};

use sar_cli::run_command;

const SMALL: &str = r#"
N = 4
[world]
num_images = 90
[cas]
epochs = 5
[ve]
epochs = 1
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

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("sar").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    cfg
}

/// Relative path and contents of every file under `root`, sorted.
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

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["gen-data", "--out", "x", "--bogus"]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["train-cas", "--data", "x"]), 2);
}

#[test]
fn eval_without_selector_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    assert_eq!(run(&["eval", "--data", p(dir.path()), "--report", p(&report)]), 3);
    assert!(!report.exists());
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[world]\nnum_imgs = 3\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]), 3);
    fs::write(&cfg, "N = 4\n[policy]\nn_prime_yes_no = 2\nn_prime_other = 9\n").unwrap();
    assert_eq!(run(&["ablate", "--config", p(&cfg)]), 3);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(run(&["gen-data", "--config", p(&cfg), "--seed", "7", "--out", p(&a)]), 0);
    assert_eq!(run(&["gen-data", "--config", p(&cfg), "--seed", "7", "--out", p(&b)]), 0);
    assert_eq!(run(&["gen-data", "--config", p(&cfg), "--seed", "8", "--out", p(&c)]), 0);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("world.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["config_hash"].is_string());
}

#[test]
fn train_and_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = d.join("data");
    let (cas, qtd, ve) = (d.join("cas.model"), d.join("qtd.model"), d.join("ve.model"));
    let report = d.join("report.json");
    let c = p(&cfg);
    assert_eq!(run(&["gen-data", "--config", c, "--out", p(&data)]), 0);
    assert_eq!(run(&["train-cas", "--config", c, "--data", p(&data), "--out", p(&cas), "--seed", "1"]), 0);
    assert_eq!(run(&["train-qtd", "--config", c, "--data", p(&data), "--out", p(&qtd), "--nprime-yesno", "2", "--nprime-other", "4"]), 0);
    assert_eq!(run(&["train-qtd", "--config", c, "--data", p(&data), "--out", p(&qtd), "--nprime-other", "9"]), 3);
    assert_eq!(
        run(&["train-ve", "--config", c, "--data", p(&data), "--cas", p(&cas), "--strategy", "RtoC", "--N", "4", "--ssl", "--alpha", "0.5", "--epochs", "1", "--out", p(&ve)]),
        0
    );
    let curve = fs::read_to_string(d.join("ve.loss.csv")).unwrap();
    let mut lines = curve.lines();
    assert!(lines.next().unwrap().starts_with("# tool_version="));
    assert_eq!(lines.next(), Some("epoch,mean_loss"));
    assert_eq!(lines.count(), 1);

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--config", c, "--data", p(&data), "--cas", p(&cas), "--report", p(&report)];
        args.extend_from_slice(extra);
        run(&args)
    };
    assert_eq!(eval(&["--ve", p(&ve), "--qtd", p(&qtd), "--strategy", "RtoC"]), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["kind"], "eval");
    assert!(v["config_hash"].is_string() && v["tool_version"].is_string());
    let acc = v["report"]["evaluation"]["accuracy_all"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(v["report"]["evaluation"]["gap"].is_number());
    assert!(d.join("report.recall.csv").exists());

    // Selector-only evaluation needs no scorer.
    assert_eq!(eval(&[]), 0);
    // N' above the trained N, a plan the scorer was not trained for, and a
    // non-uniform policy without a type model are all refused.
    assert_eq!(eval(&["--ve", p(&ve), "--qtd", p(&qtd), "--nprime-other", "5"]), 3);
    assert_eq!(eval(&["--ve", p(&ve), "--qtd", p(&qtd), "--strategy", "C"]), 3);
    assert_eq!(eval(&["--ve", p(&ve), "--strategy", "CtoR"]), 3);
    assert_eq!(eval(&["--ve", p(&ve)]), 3);
    assert_eq!(eval(&["--ve", p(&ve), "--nprime-yesno", "3", "--nprime-other", "3"]), 0);
    assert_eq!(eval(&["--split", "nope"]), 3);
}

#[test]
fn mismatched_vocabulary_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let other = d.join("other.toml");
    fs::write(&other, format!("{SMALL}\n").replace("[world]\n", "[world]\ncolors = [\"red\", \"blue\"]\n")).unwrap();
    let (a, b, cas) = (d.join("a"), d.join("b"), d.join("cas.model"));
    assert_eq!(run(&["gen-data", "--config", p(&cfg), "--out", p(&a)]), 0);
    assert_eq!(run(&["gen-data", "--config", p(&other), "--out", p(&b)]), 0);
    assert_eq!(run(&["train-cas", "--config", p(&cfg), "--data", p(&a), "--out", p(&cas)]), 0);
    let report = d.join("r.json");
    assert_eq!(run(&["eval", "--data", p(&b), "--cas", p(&cas), "--report", p(&report)]), 3);
}

#[test]
fn ablate_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(run(&["ablate", "--config", p(&cfg), "--out", p(&out)]), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let rows = v["report"]["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["CAS-only", "CAS+VE(R)", "CAS+VE(C)", "CAS+VE(RtoC)", "CAS+VE+QTD(RtoC)", "CAS+VE+SSL+QTD(RtoC)"]
    );
    assert_eq!(rows[0]["delta_vs_cas_only"], 0.0);

    assert_eq!(run(&["sweep", "--config", p(&cfg), "--out", p(&out)]), 0);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("question_type,n_prime,count,accuracy"));
    assert_eq!(csv.lines().count(), 2 + 2 + 4);
}

#[test]
fn grad_check_reports_small_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc.json");
    assert_eq!(run(&["grad-check", "--head-only", "--out", p(&out)]), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(v["report"]["max_rel_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(run(&["grad-check", "--per-tensor", "3", "--alpha", "1.0"]), 0);
    assert_eq!(run(&["grad-check", "--epsilon", "0"]), 1);
}
