use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use acton::motion::{LabeledCorpus, SkeletonSequence};

const TINY: &str = r#"{
  "synth": {"sequences": 8, "primitives_per_sequence": 3, "frames_per_primitive": 24, "pairs": 2},
  "tan": {"sequence_length": 24, "hidden_dim": 16, "ffn_dim": 32, "projection_dim": 8, "attention_heads": 2},
  "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4},
  "lexicon": {"k": 6},
  "metrics": {"sweep_k": [3, 5]}
}"#;

fn acton(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acton"))
        .current_dir(dir)
        .args(["--config", "cfg.json", "--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = acton(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// The error line printed on failure, parsed.
fn error_of(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn pipeline(dir: &Path) {
    fs::write(dir.join("cfg.json"), TINY).unwrap();
    ok(dir, &["gen-synth"]);
    ok(dir, &["train"]);
    ok(dir, &["build-lexicon"]);
    ok(dir, &["eval", "--out", "report.kv"]);
}

#[test]
fn pipeline_reruns_reproduce_the_report() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["report.kv", "report.json", "model.ckpt.history.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let kv = fs::read_to_string(a.path().join("report.kv")).unwrap();
    for key in ["config_digest=", "seed=0", "kendalls_tau=", "nmi=", "f2=", "entropy_k3="] {
        assert!(kv.contains(key), "{key} missing from\n{kv}");
    }
}

#[test]
fn commands_write_stamped_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    pipeline(dir);
    let corpus = LabeledCorpus::load_dir(&dir.join("corpus")).unwrap();
    assert_eq!(corpus.len(), 8);
    SkeletonSequence::load(&dir.join("corpus").join(LabeledCorpus::file_name(0))).unwrap();
    ok(dir, &["tokenize", "--out", "tokens.csv"]);
    ok(dir, &["detect", "--out", "det.csv"]);
    ok(dir, &["compose", "--out", "motion.skel", "--words", "3"]);
    ok(dir, &["sweep-k", "--out", "grid.csv"]);
    for f in ["tokens.csv", "det.csv", "grid.csv"] {
        let text = fs::read_to_string(dir.join(f)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# config_digest=") && first.contains("seed=0"), "{f}: {first}");
    }
    let grid = fs::read_to_string(dir.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().skip(1).collect::<Vec<_>>()[0], "k,nmi,f2");
    assert_eq!(grid.lines().count(), 4);
    let motion = SkeletonSequence::load(&dir.join("motion.skel")).unwrap();
    assert!(motion.data().iter().all(|v| v.is_finite()));
    assert_eq!(
        error_of(&acton(dir, &["tokenize", "--out", "tokens.csv"]))["error"],
        "exists"
    );
}

#[test]
fn lexicon_from_another_checkpoint_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    pipeline(dir);
    ok(dir, &["--seed", "1", "train", "--out", "other.ckpt"]);
    let out = acton(dir, &["eval", "--checkpoint", "other.ckpt", "--out", "r.kv"]);
    assert_eq!(error_of(&out)["error"], "digest_mismatch");
    assert!(!dir.join("r.kv").exists());
}

#[test]
fn failures_are_one_json_line() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    fs::write(dir.join("cfg.json"), TINY).unwrap();
    let missing = acton(dir, &["train", "--corpus", "nowhere"]);
    assert_eq!(error_of(&missing)["error"], "motion");
    fs::write(dir.join("cfg.json"), r#"{"lexicon": {"k": 0}}"#).unwrap();
    assert_eq!(error_of(&acton(dir, &["gen-synth"]))["error"], "config");
    fs::write(dir.join("cfg.json"), r#"{"tan": {"bogus": 1}}"#).unwrap();
    assert_eq!(error_of(&acton(dir, &["gen-synth"]))["error"], "config");
}
