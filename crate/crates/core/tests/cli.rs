use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmtl::data::LabeledSentence;
use mmtl::encoder::{Model, ModelConfig};
use mmtl::metrics::MetricsReport;
use mmtl::synth;
use mmtl::tokenizer::Vocabulary;
use mmtl::trainer::RunLog;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A vocabulary, a small random checkpoint and a labeled data file.
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let records = synth::acceptability_dataset(160, 12);
        let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
        let vocab = Vocabulary::build(&texts, 200).unwrap();
        vocab.save(ws.path("vocab.txt")).unwrap();
        let config = ModelConfig {
            num_layers: 2,
            hidden_size: 16,
            num_heads: 2,
            ff_size: 32,
            max_positions: 20,
            ..ModelConfig::mini(vocab.len())
        };
        Model::init(config, 1).unwrap().save(ws.path("start.ckpt")).unwrap();
        write_cola(&ws.path("data.tsv"), &records);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn write_cola(path: &Path, records: &[LabeledSentence]) {
    let mut text = String::new();
    for r in records {
        let _ = writeln!(text, "{}\t{}\t{}\t{}", r.source_code, r.label, r.author_annotation, r.text);
    }
    std::fs::write(path, text).unwrap();
}

fn mmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let help = mmtl(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in ["build-vocab", "multitrain", "sweep", "ingest", "query", "export-report"] {
        assert!(stdout(&help).contains(cmd), "{cmd} missing from help");
    }
    let sub = mmtl(&["multitrain", "--help"]);
    assert_eq!(sub.status.code(), Some(0));
    assert!(stdout(&sub).contains("--config"));

    let unknown = mmtl(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(!stderr(&unknown).is_empty());
    assert_eq!(mmtl(&["query", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(mmtl(&["query"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let ws = Workspace::new();
    let missing = mmtl(&[
        "evaluate", "--checkpoint", &ws.arg("nope.ckpt"), "--vocab", &ws.arg("vocab.txt"), "--data",
        &ws.arg("data.tsv"),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("nope.ckpt"));
}

#[test]
fn config_file_keys_and_flag_precedence() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.json"), r#"{"epochs": 1, "colour": "blue"}"#).unwrap();
    let base = [
        "finetune".to_string(),
        "--checkpoint".into(),
        ws.arg("start.ckpt"),
        "--vocab".into(),
        ws.arg("vocab.txt"),
        "--data".into(),
        ws.arg("data.tsv"),
        "--max-len".into(),
        "20".into(),
    ];
    let with = |extra: &[&str]| {
        let mut v: Vec<String> = base.to_vec();
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let args = with(&["--config", &ws.arg("bad.json"), "--out", &ws.arg("x.ckpt")]);
    let bad = mmtl(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(bad.status.code(), Some(1), "{}", stderr(&bad));
    assert!(stderr(&bad).contains("colour"));

    std::fs::write(
        ws.path("run.json"),
        r#"{"epochs": 2, "batch_size": 8, "learning_rate": 0.001, "validations_per_epoch": 4,
            "prune_heads": [1], "seed": 3, "k": 2}"#,
    )
    .unwrap();
    let args = with(&[
        "--config", &ws.arg("run.json"), "--epochs", "1", "--out", &ws.arg("ft.ckpt"), "--log", &ws.arg("ft.jsonl"),
    ]);
    let ok = mmtl(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let report: MetricsReport = serde_json::from_str(stdout(&ok).trim()).unwrap();
    let log = RunLog::from_jsonl(&std::fs::read_to_string(ws.path("ft.jsonl")).unwrap()).unwrap();
    // --epochs 1 beat the file's 2; the file's 4 validations and batch 8 applied.
    assert_eq!(log.validations().count(), 4);
    assert_eq!(log.models().next().unwrap().optimizer_steps, 16);
    assert_eq!(log.final_report().unwrap().1.confusion, report.confusion);
    let ckpt = Model::load(ws.path("ft.ckpt")).unwrap();
    assert_eq!(ckpt.pruned_heads().get(&0).cloned(), Some([1].into()));
}

#[test]
fn evaluate_export_and_sweep() {
    let ws = Workspace::new();
    let eval = mmtl(&[
        "evaluate", "--checkpoint", &ws.arg("start.ckpt"), "--vocab", &ws.arg("vocab.txt"), "--data",
        &ws.arg("data.tsv"),
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    let line = stdout(&eval);
    let report: MetricsReport = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(report.confusion.total(), 160);
    assert!(line.contains("\"mcc\":") && line.contains("\"roc_auc\":"));

    let sweep = mmtl(&[
        "sweep", "--checkpoint", &ws.arg("start.ckpt"), "--vocab", &ws.arg("vocab.txt"), "--data",
        &ws.arg("data.tsv"), "--vary", "batch_size", "--values", "4,8,16,32,64", "--epochs", "1",
        "--validations-per-epoch", "1", "--max-len", "20",
    ]);
    assert_eq!(sweep.status.code(), Some(0), "{}", stderr(&sweep));
    let tsv = stdout(&sweep);
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("batch_size\t"));
    let keys: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(keys, ["4", "8", "16", "32", "64"]);

    let bad = mmtl(&[
        "sweep", "--checkpoint", &ws.arg("start.ckpt"), "--vocab", &ws.arg("vocab.txt"), "--data",
        &ws.arg("data.tsv"), "--vary", "epochs", "--values", "1,0",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("epochs=\"0\""), "{}", stderr(&bad));

    let ft = mmtl(&[
        "multitrain", "--checkpoint", &ws.arg("start.ckpt"), "--vocab", &ws.arg("vocab.txt"), "--data",
        &ws.arg("data.tsv"), "--out", &ws.arg("m.ckpt"), "--log", &ws.arg("m.jsonl"), "--epochs", "1", "--k", "2",
        "--validations-per-epoch", "2", "--max-len", "20", "--sequential",
    ]);
    assert_eq!(ft.status.code(), Some(0), "{}", stderr(&ft));
    let export = mmtl(&["export-report", "--log", &ws.arg("m.jsonl")]);
    assert_eq!(export.status.code(), Some(0));
    assert_eq!(stdout(&export), stdout(&ft));
}

#[test]
fn ingest_then_query() {
    let ws = Workspace::new();
    std::fs::write(ws.path("docs.txt"), "the dog sleeps\nsleeps dog the\n\nA Dog sees the cat\n").unwrap();
    let ingest = |input: &str| {
        mmtl(&[
            "ingest", "--checkpoint", &ws.arg("start.ckpt"), "--vocab", &ws.arg("vocab.txt"), "--input",
            &ws.arg(input), "--store", &ws.arg("kb.jsonl"), "--max-len", "20",
        ])
    };
    let first = ingest("docs.txt");
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert_eq!(stdout(&first).trim(), "stored 3 records");
    std::fs::write(ws.path("empty.txt"), "").unwrap();
    assert_eq!(stdout(&ingest("empty.txt")).trim(), "stored 0 records");
    assert_eq!(stdout(&ingest("docs.txt")).trim(), "stored 3 records");

    let q = mmtl(&["query", "--store", &ws.arg("kb.jsonl"), "--keyword", "DOG", "--limit", "2"]);
    assert_eq!(q.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&q).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["id"], 6);
    assert_eq!(lines[1]["id"], 5);
    assert!(lines[0]["created_at"].as_str().unwrap().ends_with('Z'));

    let all = mmtl(&["query", "--store", &ws.arg("kb.jsonl")]);
    let recs: Vec<serde_json::Value> = stdout(&all).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6);
    // Inference is deterministic: both ingests agree.
    for i in 0..3 {
        assert_eq!(recs[i]["predicted_label"], recs[i + 3]["predicted_label"]);
        assert_eq!(recs[i]["confidence"], recs[i + 3]["confidence"]);
    }

    std::fs::write(ws.path("bad.jsonl"), "{\"id\":1}\n").unwrap();
    let bad = mmtl(&["query", "--store", &ws.arg("bad.jsonl")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("line 1"), "{}", stderr(&bad));
}

#[test]
fn build_vocab_and_pretrain() {
    let ws = Workspace::new();
    std::fs::write(ws.path("corpus.txt"), synth::grammar_corpus(200, 3).join("\n")).unwrap();
    let bv = mmtl(&["build-vocab", "--corpus", &ws.arg("corpus.txt"), "--max-size", "120", "--out", &ws.arg("v.txt")]);
    assert_eq!(bv.status.code(), Some(0), "{}", stderr(&bv));
    let vocab = Vocabulary::load(ws.path("v.txt")).unwrap();
    assert!(vocab.len() <= 120);
    let pt = mmtl(&[
        "pretrain", "--corpus", &ws.arg("corpus.txt"), "--vocab", &ws.arg("v.txt"), "--out", &ws.arg("p.ckpt"),
        "--layers", "1", "--hidden", "8", "--heads", "2", "--ff", "8", "--max-positions", "20", "--max-len", "20",
        "--max-steps", "5",
    ]);
    assert_eq!(pt.status.code(), Some(0), "{}", stderr(&pt));
    assert!(stdout(&pt).starts_with("5 steps"));
    let model = Model::load(ws.path("p.ckpt")).unwrap();
    assert_eq!(model.config().vocab_size, vocab.len());
}

#[test]
fn library_entry_point_matches_binary_codes() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    assert_eq!(mmtl::app::cli::run(["mmtl", "--version"], &mut out, &mut err), 0);
    assert!(String::from_utf8(out).unwrap().starts_with("mmtl "));
    assert_eq!(mmtl::app::cli::run(["mmtl", "sweep", "--vary", "colour"], &mut Vec::new(), &mut err), 1);
}
