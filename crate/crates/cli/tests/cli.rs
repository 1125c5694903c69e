use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn seqret(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqret"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn ls_prints_structures_by_size() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("programs.txt");
    fs::write(
        &file,
        "count ( with_relation ( filter ( black , find ( mouse ) ) , playing with , find ( dog ) ) )\n",
    )
    .unwrap();
    let out = seqret(&["ls", file.to_str().unwrap(), "--l", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("size 1:"));
    assert!(text.contains("size 2:"));
    assert!(!text.contains("size 3:"));
    for key in ["playing -> with", "black <-> find", "<root> -> count", "filter <-> playing"] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
    let lines = text.lines().filter(|l| l.starts_with(' ')).count();
    assert_eq!(lines, 9 + 13);
}

#[test]
fn parse_rejects_bad_programs() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.txt");
    fs::write(&file, "count ( find ( dog )\n").unwrap();
    let out = seqret(&["parse", file.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqret(&["build-sft", "-c", "nope.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(seqret(&["evaluate", "-c", "x.toml", "--retriever", "magic"], dir.path()).status.code(), Some(2));
    assert_eq!(seqret(&["no-such-command"], dir.path()).status.code(), Some(2));
}

const TINY: &str = r#"
seed = 3
k = 2

[synthetic]
pool = 40
queries = 12
train_queries = 6

[encoder]
dim = 8

[sft]
epochs = 3
batch_size = 16
learning_rate = 0.01
optimizer = "adam"

[rl]
group_size = 4
batch_size = 4
epochs = 1
learning_rate = 0.003
optimizer = "adam"
"#;

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["gen-synthetic", "-c", c],
        vec!["build-sft", "-c", c],
        vec!["train-sft", "-c", c],
        vec!["train-sft", "-c", c, "--dense"],
        vec!["train-rl", "-c", c],
    ] {
        let out = seqret(&args, dir.path());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for retriever in ["random", "bm25", "dense", "rcr"] {
        let out = seqret(&["evaluate", "-c", c, "--retriever", retriever], dir.path());
        assert!(out.status.success(), "{retriever}: {}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
        assert_eq!(summary["n_queries"], 6);
    }
    let out = seqret(&["retrieve", "-c", c, "--query", "is there a black dog"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for artifact in ["data/pool.jsonl", "out/sft.jsonl", "out/sft.ckpt", "out/dense.ckpt", "out/rl.ckpt", "out/rl_log.jsonl"] {
        assert!(dir.path().join(artifact).exists(), "missing {artifact}");
    }
    let report = fs::read_to_string(dir.path().join("out/report.jsonl")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("{\"summary\""));
}
