//! Subprocess tests for the `tabenc` binary: exit codes, determinism, and
//! the documented behavior of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tabenc")
}

fn fixture(name: &str) -> &'static str {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    Box::leak(path.to_string_lossy().into_owned().into_boxed_str())
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn tabenc")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Run preprocess on the pretraining fixture into `dir`, returning the
/// instances file path.
fn preprocess_fixture(dir: &Path) -> PathBuf {
    let inst = dir.join("instances.jsonl");
    let out = run(&[
        "preprocess",
        "--corpus",
        fixture("pretrain_corpus.jsonl"),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        inst.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    inst
}

/// Train a small checkpoint for the encode/inspect tests.
fn train_small(dir: &Path, inst: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let ck = dir.join(name);
    let mut args = vec![
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        ck.to_str().unwrap(),
        "--steps",
        "2",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    ck
}

#[test]
fn preprocess_is_deterministic_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for path in [&a, &b] {
        let out = run(&[
            "preprocess",
            "--corpus",
            fixture("pretrain_corpus.jsonl"),
            "--vocab",
            fixture("vocab.txt"),
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
        assert_eq!(report["instances"], 50);
        assert_eq!(report["kept"], 50);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 50);
}

#[test]
fn preprocess_reports_cleaning_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("clean.jsonl");
    let out = run(&[
        "preprocess",
        "--corpus",
        fixture("cleaning_corpus.jsonl"),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["kept"], 17);
    assert_eq!(report["rejected"]["R4"], 3);
    assert_eq!(report["cells_blanked"], 5);
    assert_eq!(report["columns_dropped"], 5);
    assert_eq!(report["malformed_lines"], 0);
    assert_eq!(report["instances"], 17);
}

#[test]
fn preprocess_empty_corpus_yields_zero_instances() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.jsonl");
    std::fs::write(&corpus, "").unwrap();
    let out_file = dir.path().join("out.jsonl");
    let out = run(&[
        "preprocess",
        "--corpus",
        corpus.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["instances"], 0);
    assert_eq!(std::fs::read_to_string(&out_file).unwrap(), "");
}

#[test]
fn preprocess_missing_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "preprocess",
        "--corpus",
        dir.path().join("nope.jsonl").to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        dir.path().join("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"));
}

#[test]
fn missing_required_flag_exits_2() {
    let out = run(&["preprocess", "--corpus", "x.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pretrain_zero_steps_writes_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let ck = dir.path().join("ck.bin");
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        ck.to_str().unwrap(),
        "--steps",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), "", "no step logs for --steps 0");
    let loaded = tabenc::checkpoint::load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.step, 0);
    assert_eq!(loaded.total_steps, 0);
}

#[test]
fn pretrain_same_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let mut outputs = Vec::new();
    for name in ["a.bin", "b.bin"] {
        let ck = dir.path().join(name);
        let log = dir.path().join(format!("{name}.log"));
        let out = run(&[
            "pretrain",
            "--instances",
            inst.to_str().unwrap(),
            "--vocab",
            fixture("vocab.txt"),
            "--out",
            ck.to_str().unwrap(),
            "--steps",
            "4",
            "--seed",
            "7",
            "--log",
            log.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push((std::fs::read(&ck).unwrap(), std::fs::read(&log).unwrap(), out.stdout));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "checkpoint bytes");
    assert_eq!(outputs[0].1, outputs[1].1, "log file bytes");
    assert_eq!(outputs[0].2, outputs[1].2, "stdout bytes");
    // The log file mirrors stdout exactly.
    assert_eq!(outputs[0].1, outputs[0].2);
}

#[test]
fn pretrain_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let full = dir.path().join("full.bin");
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        full.to_str().unwrap(),
        "--steps",
        "8",
        "--checkpoint-every",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let full_log: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(full_log.len(), 8);
    let mid = dir.path().join("full.bin.step4");
    assert!(mid.is_file(), "periodic checkpoint exists");

    // Resuming from step 4 replays steps 5..8 identically; --steps is
    // omitted to show the schedule total is recovered from the checkpoint.
    let resumed = dir.path().join("resumed.bin");
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        resumed.to_str().unwrap(),
        "--checkpoint",
        mid.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resumed_log: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(resumed_log, full_log[4..].to_vec());
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());
}

#[test]
fn pretrain_diverging_loss_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        dir.path().join("ck.bin").to_str().unwrap(),
        "--steps",
        "10",
        "--lr",
        "100000000",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn pretrain_empty_instances_with_steps_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("none.jsonl");
    std::fs::write(&inst, "").unwrap();
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        dir.path().join("ck.bin").to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_applies_under_cli_flags() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps": 9, "lr": 0.002}"#).unwrap();
    // --steps overrides the file; lr comes from the file.
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        dir.path().join("ck.bin").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2, "CLI --steps beats the config file");
    assert_eq!(lines[0]["lr"], 0.002, "lr comes from the config file");

    let unknown = dir.path().join("bad.json");
    std::fs::write(&unknown, r#"{"stepz": 9}"#).unwrap();
    let out = run(&[
        "pretrain",
        "--instances",
        inst.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--out",
        dir.path().join("ck2.bin").to_str().unwrap(),
        "--config",
        unknown.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "unknown config fields are rejected");
}

#[test]
fn encode_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let ck = train_small(dir.path(), &inst, "ck.bin", &[]);
    let args = [
        "encode",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city did piotr s last 1st place finish occur",
    ];
    let first = run(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let enc: serde_json::Value = serde_json::from_str(stdout(&first).trim()).unwrap();
    assert_eq!(enc["columns"].as_array().unwrap().len(), 3);
    assert_eq!(enc["utterance"].as_array().unwrap().len(), 11);
    assert_eq!(enc["table"].as_array().unwrap().len(), 64);
    for col in enc["columns"].as_array().unwrap() {
        assert_eq!(col.as_array().unwrap().len(), 64);
    }
    let second = run(&args);
    assert_eq!(first.stdout, second.stdout, "identical bytes on repeat");
}

#[test]
fn encode_k_above_row_count_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let ck = train_small(dir.path(), &inst, "ck.bin", &[]);
    let out = run(&[
        "encode",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city",
        "--k",
        "9",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("warning"), "{}", stderr(&out));
    assert!(stderr(&out).contains("all rows"));
}

#[test]
fn encode_config_mismatches_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let inst = preprocess_fixture(dir.path());
    let ck = train_small(dir.path(), &inst, "ck.bin", &[]);
    let base = [
        "encode",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city",
    ];

    // k=1 demands zero vertical layers; the checkpoint has three.
    let mut args = base.to_vec();
    args.extend(["--k", "1"]);
    assert_eq!(code(&run(&args)), 2);

    // A shape-bearing field cannot be overridden.
    let mut args = base.to_vec();
    args.extend(["--hidden-dim", "32"]);
    let out = run(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("conflicts with the checkpoint"));

    // A vocabulary of the wrong size is a config error.
    let small_vocab = dir.path().join("small.txt");
    std::fs::write(&small_vocab, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\n").unwrap();
    let mut args = base.to_vec();
    args[4] = small_vocab.to_str().unwrap();
    let out = run(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("vocab"));
}

#[test]
fn inspect_shows_template_cell_and_tags() {
    let out = run(&[
        "inspect",
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city did piotr s last 1st place finish occur",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("year | real | 2005"), "{text}");
    assert!(text.contains("content snapshot"));
    assert!(text.contains("name(0)"));
    assert!(text.contains("value(2)"));
    assert!(text.contains("sample mask plan"));
    assert!(text.contains("<- table row"), "provenance is shown");
}

#[test]
fn inspect_k1_labels_synthetic_donors() {
    let out = run(&[
        "inspect",
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city did piotr s last 1st place finish occur",
        "--k",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("synthetic"), "{text}");
    assert!(text.contains("column 0 (Year) <- table row"), "{text}");
    assert!(text.contains("column 2 (Position) <- table row"), "{text}");
}

#[test]
fn inspect_name_only_has_no_type_or_value_tokens() {
    let out = run(&[
        "inspect",
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city",
        "--linearization",
        "name_only",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let row_line = text
        .lines()
        .find(|l| l.trim_start().starts_with("tokens:"))
        .expect("a tokens line");
    assert!(!row_line.contains("real"), "{row_line}");
    assert!(!row_line.contains('|'), "{row_line}");
    assert!(!row_line.contains("2005"), "{row_line}");
    assert!(row_line.contains("year"), "{row_line}");
    let tag_line = text
        .lines()
        .find(|l| l.trim_start().starts_with("tags:"))
        .expect("a tags line");
    assert!(!tag_line.contains("type("), "{tag_line}");
    assert!(!tag_line.contains("value("), "{tag_line}");
}

#[test]
fn inspect_is_deterministic() {
    let args = [
        "inspect",
        "--vocab",
        fixture("vocab.txt"),
        "--table",
        fixture("fig1_table.json"),
        "--utterance",
        "in which city did piotr s last 1st place finish occur",
        "--seed",
        "21",
    ];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}
