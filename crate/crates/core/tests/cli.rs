use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use nlsql::corpus::{load_examples_for_schemas, load_schemas};
use nlsql::encoder::EncoderConfig;
use nlsql::model::{vocab_from_corpus, Model, ModelConfig};

fn nlsql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlsql"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn nlsql_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_nlsql"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    tables: PathBuf,
    examples: PathBuf,
}

fn export(count: usize, seed: u64) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let tables = root.join("tables.jsonl");
    let examples = root.join("examples.jsonl");
    let o = nlsql(&[
        "export-demo-corpus",
        "--tables",
        s(&tables),
        "--examples",
        s(&examples),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    Corpus {
        _dir: dir,
        root,
        tables,
        examples,
    }
}

fn train(c: &Corpus, ckpt: &Path, epochs: usize, extra: &[&str]) -> Output {
    let epochs = epochs.to_string();
    let mut args = vec![
        "train",
        "--tables",
        s(&c.tables),
        "--examples",
        s(&c.examples),
        "--checkpoint",
        s(ckpt),
        "--epochs",
        &epochs,
        "--embed-dim",
        "8",
        "--hidden-dim",
        "8",
        "--head-hidden",
        "8",
    ];
    args.extend_from_slice(extra);
    nlsql(&args)
}

fn epoch_losses(out: &str) -> Vec<f64> {
    out.lines()
        .filter_map(|l| l.strip_prefix("epoch "))
        .map(|l| l.split("\tloss ").nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_lowers_loss_and_writes_report() {
    let c = export(16, 1);
    let ckpt = c.root.join("model.bin");
    let log = c.root.join("loss.tsv");
    let o = train(&c, &ckpt, 12, &["--report-out", s(&log)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let losses = epoch_losses(&stdout(&o));
    assert_eq!(losses.len(), 12);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert!(ckpt.is_file());
    let tsv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(tsv.lines().count(), 13);
    assert!(tsv.starts_with("epoch\tloss\n"));
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let c = export(8, 2);
    let ckpt = c.root.join("init.bin");
    let o = train(&c, &ckpt, 0, &["--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(epoch_losses(&stdout(&o)).is_empty());

    let schemas = load_schemas(&c.tables).unwrap();
    let examples = load_examples_for_schemas(&c.examples, &schemas).unwrap().examples;
    let vocab = vocab_from_corpus(&examples, &schemas);
    let fresh = Model::new(
        ModelConfig {
            encoder: EncoderConfig::trainable(vocab.len(), 8, 8, 5),
            head_hidden: 8,
        },
        vocab,
    )
    .unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), fresh.to_bytes());
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let ckpt = dir.path().join("m.bin");
    let o = nlsql(&[
        "train",
        "--tables",
        s(&missing),
        "--examples",
        s(&missing),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.jsonl"), "{}", stderr(&o));
    assert!(!ckpt.exists());

    let o = nlsql(&[
        "eval",
        "--tables",
        s(&missing),
        "--examples",
        s(&missing),
        "--gold-self-test",
    ]);
    assert!(!o.status.success());
}

#[test]
fn gold_self_test_scores_everything_correct() {
    let c = export(24, 3);
    let report = c.root.join("report.json");
    let o = nlsql(&[
        "eval",
        "--tables",
        s(&c.tables),
        "--examples",
        s(&c.examples),
        "--gold-self-test",
        "--report-out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("| Acc_lf           |  100.0 |"), "{out}");
    assert!(out.contains("| Acc_ex           |  100.0 |"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["acc_lf"], 1.0);
    assert_eq!(json["evaluated"], 24);
    assert!(c.root.join("report.json.txt").is_file());
}

#[test]
fn eval_reports_greedy_and_beam() {
    let c = export(12, 4);
    let ckpt = c.root.join("model.bin");
    assert!(train(&c, &ckpt, 3, &[]).status.success());
    let o = nlsql(&[
        "eval",
        "--tables",
        s(&c.tables),
        "--examples",
        s(&c.examples),
        "--checkpoint",
        s(&ckpt),
        "--beam-width",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("greedy Acc_lf"), "{out}");
    assert!(out.contains("beam (width 4)"), "{out}");
    assert!(out.contains("Where Value span"), "{out}");
}

#[test]
fn split_against_itself_keeps_nothing() {
    let c = export(10, 5);
    let out = c.root.join("split.jsonl");
    let o = nlsql(&[
        "split-zero-shot",
        "--tables",
        s(&c.tables),
        "--train-examples",
        s(&c.examples),
        "--examples",
        s(&c.examples),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("retained 0 questions on 0 tables"),
        "{}",
        stdout(&o)
    );
    assert_eq!(std::fs::read_to_string(&out).unwrap().trim(), "");

    let o = nlsql(&[
        "eval",
        "--tables",
        s(&c.tables),
        "--examples",
        s(&c.examples),
        "--gold-self-test",
        "--split-against",
        s(&c.examples),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("zero-shot (gold self-test) (0 examples"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn predict_reads_until_end_of_input() {
    let c = export(12, 6);
    let ckpt = c.root.join("model.bin");
    assert!(train(&c, &ckpt, 2, &[]).status.success());
    let args = [
        "predict",
        "--tables",
        s(&c.tables),
        "--checkpoint",
        s(&ckpt),
        "--table-id",
        "demo-cities",
    ];
    let o = nlsql_stdin(&args, "");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("table demo-cities (City | Country | Population | Area)"));

    let o = nlsql_stdin(&args, "\n   \nhow many city when country is france?\n");
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.matches("please type a question").count(), 2, "{out}");
    assert!(out.contains("SELECT "), "{out}");
    assert!(out.contains("  sa: "), "{out}");

    let o = nlsql_stdin(&args[..5], "x\n");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--table-id"), "{}", stderr(&o));
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let c = export(8, 7);
    let ckpt = c.root.join("model.bin");
    assert!(train(&c, &ckpt, 0, &[]).status.success());
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    let o = nlsql_stdin(
        &[
            "predict",
            "--tables",
            s(&c.tables),
            "--checkpoint",
            s(&ckpt),
            "--table-id",
            "demo-films",
        ],
        "",
    );
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));
}

#[test]
fn grad_check_command() {
    let o = nlsql(&["grad-check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).trim_end().ends_with("ok"));
    let o = nlsql(&["grad-check", "--tolerance", "1e-12"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gradient check failed"));
}
