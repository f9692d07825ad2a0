//! End-to-end tests of the `srd` binary: every command, every exit code.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srd_core::corpus::{build_vocab, read_records};
use srd_core::tinylm::{save_checkpoint, LmConfig, TinyLm};

fn srd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_srd"))
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("stderr is UTF-8")
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout_of(output),
        stderr_of(output)
    );
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout_of(output),
        stderr_of(output)
    );
}

/// Generates a corpus through the binary itself and returns its path.
fn gen_corpus(dir: &Path, name: &str, alphabet: usize, count: usize) -> PathBuf {
    let path = dir.join(name);
    let output = srd()
        .args([
            "gen",
            "--template",
            "copy",
            "--count",
            &count.to_string(),
            "--seed",
            "1",
            "--alphabet",
            &alphabet.to_string(),
            "--levels",
            "4",
            "--out",
        ])
        .arg(&path)
        .output()
        .unwrap();
    assert_ok(&output);
    path
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// A quick config: tiny teacher, one epoch per stage, two baseline epochs.
fn quick_config(data: &Path) -> String {
    format!(
        "data = {}\nteacher_embed_dim = 8\nteacher_hidden_dim = 16\nteacher_epochs = 1\n\
         epochs_per_stage = 1\nbaseline_epochs = 2\n",
        data.display()
    )
}

#[test]
fn gen_is_deterministic_and_counts_lines() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_corpus(dir.path(), "a.jsonl", 8, 10);
    let b = gen_corpus(dir.path(), "b.jsonl", 8, 10);
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a.iter().filter(|&&c| c == b'\n').count(), 10);
    assert_eq!(bytes_a, bytes_b, "same flags must give identical files");
}

#[test]
fn gen_unknown_template_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let output = srd()
        .args(["gen", "--template", "mystery", "--count", "1", "--out"])
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("mystery"));
}

#[test]
fn bad_thread_env_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let output = srd()
        .env("SRD_THREADS", "lots")
        .args(["gen", "--template", "copy", "--count", "1", "--out"])
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("SRD_THREADS"));
}

/// Saves an untrained (all-zero, uniform-logit) checkpoint for a corpus.
fn zeros_checkpoint(dir: &Path, corpus: &Path, name: &str) -> (PathBuf, usize) {
    let records = read_records(corpus).unwrap();
    let vocab = build_vocab(&records, 1);
    let config = LmConfig {
        vocab_size: vocab.len(),
        context: 8,
        embed_dim: 4,
        hidden_dim: 8,
    };
    let model = TinyLm::zeros(config);
    let path = dir.join(name);
    save_checkpoint(&path, &model, &vocab).unwrap();
    (path, vocab.len())
}

#[test]
fn reflect_prints_kept_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 100);
    let (ckpt, _) = zeros_checkpoint(dir.path(), &corpus, "student.json");
    let config = write_config(dir.path(), "reflect.cfg", "decode_max_len = 6\n");
    let out_a = dir.path().join("report_a.jsonl");
    let out_b = dir.path().join("report_b.jsonl");
    for out in [&out_a, &out_b] {
        let output = srd()
            .args(["reflect", "--data"])
            .arg(&corpus)
            .arg("--student")
            .arg(&ckpt)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert_ok(&output);
        assert!(
            stdout_of(&output).contains("kept 75 / 100"),
            "default lambda keeps floor(0.75 * 100): {}",
            stdout_of(&output)
        );
    }
    let report = std::fs::read(&out_a).unwrap();
    assert_eq!(report.iter().filter(|&&c| c == b'\n').count(), 100);
    assert_eq!(report, std::fs::read(&out_b).unwrap());
}

#[test]
fn reflect_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 10);
    let config = write_config(dir.path(), "reflect.cfg", "");
    let output = srd()
        .args(["reflect", "--data"])
        .arg(&corpus)
        .arg("--student")
        .arg(dir.path().join("no-such-checkpoint.json"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("report.jsonl"))
        .output()
        .unwrap();
    assert_exit(&output, 2);
}

#[test]
fn train_default_srd_budget_is_exactly_point_six() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 100);
    // Default epochs (8 per stage / 20 baseline) with 80 train pairs:
    // keep 60, stages of 20 -> visits 8*(20+40+60) = 960 = 0.6 * 20 * 80.
    let config = write_config(
        dir.path(),
        "train.cfg",
        &format!(
            "mode = srd\ndata = {}\nteacher_embed_dim = 8\nteacher_hidden_dim = 16\nteacher_epochs = 2\n",
            corpus.display()
        ),
    );
    let out_dir = dir.path().join("run");
    let output = srd()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_ok(&output);
    assert!(stdout_of(&output).contains("budget=0.6000"));

    for artifact in [
        "teacher.json",
        "student.json",
        "plan.json",
        "reflection.jsonl",
        "epochs.csv",
        "summary.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["budget_fraction"], serde_json::json!(0.6));
    assert_eq!(summary["kept"], serde_json::json!(60));
    assert_eq!(summary["total_train_pairs"], serde_json::json!(80));
    assert!(summary["timing"]["training_seconds"].as_f64().unwrap() > 0.0);
    let epochs = std::fs::read_to_string(out_dir.join("epochs.csv")).unwrap();
    assert!(epochs.starts_with("stage,epoch,train_ce,train_kd,valid_ce,tau,alpha,cumulative_visits\n"));
    // 3 stages * 8 epochs of rows after the header.
    assert_eq!(epochs.lines().count(), 1 + 24);
}

#[test]
fn train_baseline_budget_is_one_and_skips_curation_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(dir.path(), "train.cfg", &quick_config(&corpus));
    let out_dir = dir.path().join("run");
    let output = srd()
        .args(["train", "--mode", "baseline_offpolicy", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_ok(&output);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["budget_fraction"], serde_json::json!(1.0));
    assert!(!out_dir.join("plan.json").exists());
    assert!(!out_dir.join("reflection.jsonl").exists());
}

#[test]
fn train_reruns_are_byte_identical_outside_timing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(
        dir.path(),
        "train.cfg",
        &format!("mode = srd\n{}", quick_config(&corpus)),
    );
    let mut summaries = Vec::new();
    for name in ["run_a", "run_b"] {
        let out_dir = dir.path().join(name);
        let output = srd()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_ok(&output);
        let mut summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
                .unwrap();
        summary.as_object_mut().unwrap().remove("timing");
        summaries.push(summary);
    }
    assert_eq!(summaries[0], summaries[1]);
    let student_a = std::fs::read(dir.path().join("run_a/student.json")).unwrap();
    let student_b = std::fs::read(dir.path().join("run_b/student.json")).unwrap();
    assert_eq!(student_a, student_b);
    let epochs_a = std::fs::read(dir.path().join("run_a/epochs.csv")).unwrap();
    let epochs_b = std::fs::read(dir.path().join("run_b/epochs.csv")).unwrap();
    assert_eq!(epochs_a, epochs_b);
}

#[test]
fn train_missing_mode_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(dir.path(), "train.cfg", &quick_config(&corpus));
    let output = srd()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("mode"));
}

#[test]
fn train_unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(
        dir.path(),
        "train.cfg",
        &format!("mode = srd\nwat = 1\n{}", quick_config(&corpus)),
    );
    let output = srd()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("wat"));
}

#[test]
fn train_unwritable_out_dir_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(
        dir.path(),
        "train.cfg",
        &format!("mode = srd\n{}", quick_config(&corpus)),
    );
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "a file, not a directory").unwrap();
    let output = srd()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(blocker.join("run"))
        .output()
        .unwrap();
    assert_exit(&output, 1);
}

#[test]
fn eval_untrained_checkpoint_scores_ln_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 40);
    let (ckpt, vocab_size) = zeros_checkpoint(dir.path(), &corpus, "zeros.json");
    let output = srd()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&corpus)
        .output()
        .unwrap();
    assert_ok(&output);
    let metrics: serde_json::Value = serde_json::from_str(&stdout_of(&output)).unwrap();
    let expected = (vocab_size as f64).ln();
    let got = metrics["mean_ce"].as_f64().unwrap();
    assert!(
        (got - expected).abs() <= 1e-6,
        "uniform logits must score ln(V): got {got}, want {expected}"
    );
    let rerun = srd()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(output.stdout, rerun.stdout, "eval must be deterministic");
}

#[test]
fn eval_vocab_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let small = gen_corpus(dir.path(), "small.jsonl", 4, 40);
    let wide = gen_corpus(dir.path(), "wide.jsonl", 8, 40);
    let (ckpt, _) = zeros_checkpoint(dir.path(), &small, "small.json");
    let output = srd()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&wide)
        .output()
        .unwrap();
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("vocab mismatch"));
}

#[test]
fn eval_empty_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 10);
    let (ckpt, _) = zeros_checkpoint(dir.path(), &corpus, "zeros.json");
    let empty = write_config(dir.path(), "empty.jsonl", "");
    let output = srd()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&empty)
        .output()
        .unwrap();
    assert_exit(&output, 2);
}

#[test]
fn sweep_degenerate_row_equals_direct_train() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    // lambda = 1.0 and seed = 1 in the base config so the direct train run
    // is the same configuration the sweep's single cell uses.
    let config = write_config(
        dir.path(),
        "sweep.cfg",
        &format!("mode = srd\nlambda = 1.0\nseed = 1\n{}", quick_config(&corpus)),
    );
    let csv_path = dir.path().join("grid.csv");
    let output = srd()
        .args([
            "sweep", "--axis", "lambda", "--values", "1.0", "--seeds", "1", "--config",
        ])
        .arg(&config)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_ok(&output);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "header plus one row:\n{csv}");
    assert!(lines[0].starts_with("lambda,seed,"));

    let out_dir = dir.path().join("run");
    let output = srd()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_ok(&output);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    let row: Vec<&str> = lines[1].split(',').collect();
    // Columns: lambda, seed, kept, budget, valid_ce, valid_rouge, test_ce, test_rouge.
    assert_eq!(row[2].parse::<usize>().unwrap(), summary["kept"].as_u64().unwrap() as usize);
    assert_eq!(
        row[6].parse::<f64>().unwrap(),
        summary["final_test"]["mean_ce"].as_f64().unwrap(),
        "degenerate sweep cell must equal the direct run"
    );
}

#[test]
fn sweep_grid_shape_and_axis_header() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(
        dir.path(),
        "sweep.cfg",
        &format!("mode = srd\n{}", quick_config(&corpus)),
    );
    let csv_path = dir.path().join("grid.csv");
    let output = srd()
        .args([
            "sweep", "--axis", "n_stages", "--values", "2,3", "--seeds", "0,1", "--config",
        ])
        .arg(&config)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_ok(&output);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4, "|values| x |seeds| rows:\n{csv}");
    assert!(lines[0].starts_with("n_stages,seed,"));
    let first_col: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first_col, vec!["2", "2", "3", "3"]);
}

#[test]
fn sweep_unknown_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "corpus.jsonl", 8, 60);
    let config = write_config(
        dir.path(),
        "sweep.cfg",
        &format!("mode = srd\n{}", quick_config(&corpus)),
    );
    let output = srd()
        .args([
            "sweep", "--axis", "gamma", "--values", "1", "--seeds", "0", "--config",
        ])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("grid.csv"))
        .output()
        .unwrap();
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("gamma"));
}
