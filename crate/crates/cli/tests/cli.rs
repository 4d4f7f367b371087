//! Black-box tests of the command-line surface: exit codes, file
//! outputs, and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geotweet::corpus::{generate_synthetic, save_corpus_jsonl, SyntheticSpec};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_geotweet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        grid_rows: 2,
        grid_cols: 2,
        num_users: 12,
        posts_per_user: 6,
        locality: 1.0,
        signature_words: 8,
        shared_words: 10,
        tokens_per_post: 6,
        signature_ratio: 0.7,
        time_span_days: 3,
        seed,
    }
}

fn write_corpus(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    save_corpus_jsonl(&generate_synthetic(&tiny_spec(seed)).unwrap(), &path).unwrap();
    path
}

fn write_config(dir: &Path, corpus: &Path, model: &str) -> PathBuf {
    let path = dir.join("train.toml");
    std::fs::write(
        &path,
        format!(
            "[data]\ncorpus = {:?}\nratios = [0.8, 0.1, 0.1]\nstratify = true\n\n[model]\n{model}",
            corpus.to_str().unwrap()
        ),
    )
    .unwrap();
    path
}

const SMALL_MH: &str = "variant = \"mh\"\ntask = \"zipcode\"\nemb_dim = 8\nheads = 2\n\
    encoders = 1\nepochs = 1\nbatch_size = 16\nlr = 0.01\nmax_words = 8\nseed = 1\n";

fn train_small(dir: &Path) -> PathBuf {
    let corpus = write_corpus(dir, 4);
    let config = write_config(dir, &corpus, SMALL_MH);
    let out = dir.join("run");
    let res = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "{}", stderr(&res));
    out.join("checkpoint.json")
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        toml::to_string(&tiny_spec(11)).unwrap(),
    )
    .unwrap();
    for out in ["a", "b"] {
        let res = run(&[
            "gen-data",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&res), 0, "{}", stderr(&res));
    }
    for file in ["corpus.jsonl", "regions.geojson"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs between identical gen-data runs");
    }
}

#[test]
fn gen_data_rejects_invalid_spec_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    let mut bad = tiny_spec(11);
    bad.locality = 1.5;
    std::fs::write(&spec, toml::to_string(&bad).unwrap()).unwrap();
    let res = run(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 2, "{}", stderr(&res));
}

#[test]
fn train_missing_config_exits_2() {
    let res = run(&["train", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_eq!(exit_code(&res), 2, "{}", stderr(&res));
}

#[test]
fn train_mh_c_without_embeddings_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 4);
    let config = write_config(
        dir.path(),
        &corpus,
        "variant = \"mh_c\"\ntask = \"zipcode\"\nemb_dim = 8\nheads = 2\nencoders = 1\n\
         epochs = 1\nseed = 1\n",
    );
    let res = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 2, "{}", stderr(&res));
    assert!(
        stderr(&res).contains("embeddings"),
        "error should name the missing field: {}",
        stderr(&res)
    );
}

#[test]
fn train_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 4);
    let config = write_config(
        dir.path(),
        &corpus,
        "variant = \"mh\"\ntask = \"zipcode\"\nemb_dim = 8\nheads = 2\nencoders = 1\n\
         epochs = 5\noptimizer = \"sgd\"\nlr = 1e12\nseed = 1\n",
    );
    let res = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 3, "{}", stderr(&res));
}

#[test]
fn predict_empty_input_succeeds_with_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = train_small(dir.path());
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = dir.path().join("predictions.jsonl");
    let res = run(&[
        "predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "{}", stderr(&res));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn predict_unlabeled_rows_have_label_and_probability() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = train_small(dir.path());
    let input = dir.path().join("input.jsonl");
    let rows: String = (0..5)
        .map(|i| {
            format!(
                "{{\"id\":\"q{i}\",\"text\":\"sig0x1 sig0x2\",\"username\":\"x\",\"created_at\":9}}\n"
            )
        })
        .collect();
    std::fs::write(&input, rows).unwrap();
    let out = dir.path().join("predictions.jsonl");
    let res = run(&[
        "predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "{}", stderr(&res));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["pred_label"].is_string());
        let p = v["probability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        let dist: f64 = v["distribution"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((dist - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = train_small(dir.path());
    let out = dir.path().join("eval");
    let res = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--corpus",
        dir.path().join("corpus.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "{}", stderr(&res));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["eval"]["accuracy"].is_number());
    assert!(out.join("report.txt").exists());
}

#[test]
fn ablate_with_empty_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 4);
    let config = write_config(dir.path(), &corpus, SMALL_MH);
    let res = run(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--study",
        "num-clusters",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 2, "{}", stderr(&res));
}
