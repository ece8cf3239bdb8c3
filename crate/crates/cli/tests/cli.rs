use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lowbit::model::checkpoint::{from_container, to_container};
use lowbit::quant::Container;

fn lowbit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowbit")).args(args).env("TSRQ_THREADS", "1").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Trains a tiny model on a synthetic corpus; returns (checkpoint, corpus).
fn tiny(dir: &Path) -> (PathBuf, PathBuf) {
    let (fp, corpus) = (dir.join("fp.tsrq"), dir.join("corpus.bin"));
    ok(&lowbit(&[
        "train-toy", "--synthetic", "--synthetic-words", "10", "--synthetic-tokens", "512",
        "--vocab-size", "32", "--d-model", "16", "--heads", "2", "--blocks", "2", "--mlp-hidden", "16",
        "--seq-len", "8", "--steps", "20", "--batch-size", "4", "--save-corpus", p(&corpus), "--out", p(&fp),
    ]));
    (fp, corpus)
}

fn quantize(dir: &Path, fp: &Path, corpus: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "quantize", "--model", p(fp), "--data", p(corpus), "--data-format", "tokens", "--take", "4",
        "--group-size", "8", "--schedule", "exp:t=4,K=3", "--steps", "5", "--out", p(&out),
    ];
    args.extend_from_slice(extra);
    ok(&lowbit(&args));
    out
}

#[test]
fn end_to_end_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, corpus) = tiny(dir.path());
    let report = dir.path().join("r.jsonl");
    let q = quantize(dir.path(), &fp, &corpus, "q.tsrq", &["--report", p(&report)]);
    let lines = std::fs::read_to_string(&report).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["final_loss"].as_f64().unwrap() <= first["initial_loss"].as_f64().unwrap());

    let eval = ok(&lowbit(&["eval-ppl", "--model", p(&q), "--data", p(&corpus), "--data-format", "tokens"]));
    assert!(eval.contains("perplexity:"));
    assert!(eval.contains("weight memory:") && eval.contains("bytes packed"), "{eval}");

    // Replaying the container's recorded command rewrites the same bytes.
    let original = std::fs::read(&q).unwrap();
    std::fs::remove_file(&q).unwrap();
    ok(&lowbit(&["replay", p(&original_path(&q, &original))]));
    assert_eq!(std::fs::read(&q).unwrap(), original);
}

/// Writes a copy of the container next to `q` so replay can overwrite `q`.
fn original_path(q: &Path, bytes: &[u8]) -> PathBuf {
    let copy = q.with_extension("orig");
    std::fs::write(&copy, bytes).unwrap();
    copy
}

#[test]
fn rtn_has_no_flips() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, corpus) = tiny(dir.path());
    let q = quantize(dir.path(), &fp, &corpus, "rtn.tsrq", &["--method", "rtn"]);
    let table = ok(&lowbit(&["inspect-flips", "--model", p(&fp), "--quantized", p(&q)]));
    let all = table.lines().find(|l| l.starts_with("all")).unwrap();
    let fields: Vec<&str> = all.split_whitespace().collect();
    assert_eq!(fields[1], "0", "{table}");
    assert_eq!(fields[3], "0.000%");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsrq");
    // Usage errors.
    assert_eq!(lowbit(&["quantize"]).status.code(), Some(1));
    assert_eq!(lowbit(&["no-such-command"]).status.code(), Some(1));
    // I/O.
    let out = lowbit(&["eval-ppl", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));

    let (fp, corpus) = tiny(dir.path());
    let base = ["quantize", "--model", p(&fp), "--data", p(&corpus), "--data-format", "tokens", "--out"];
    let target = dir.path().join("x.tsrq");
    let run = |extra: &[&str]| {
        let mut a: Vec<&str> = base.to_vec();
        a.push(p(&target));
        a.extend_from_slice(extra);
        lowbit(&a)
    };
    // Invalid arguments.
    for bad in [
        &["--bits", "1"][..],
        &["--bits", "9"],
        &["--group-size", "5"],
        &["--gamma", "1.5"],
        &["--schedule", "list:50,20"],
        &["--schedule", "cosine"],
        &["--lr", "0"],
    ] {
        let out = run(bad);
        assert_eq!(out.status.code(), Some(1), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    }
    // A non-finite embedding makes the reconstruction loss diverge.
    let c = Container::load(&fp).unwrap();
    let mut model = from_container(&c).unwrap();
    model.tok_emb.data_mut().fill(f32::NAN);
    let bad = dir.path().join("nan.tsrq");
    to_container(&model, &BTreeMap::new(), serde_json::json!({})).unwrap().save(&bad).unwrap();
    let mut a = vec!["quantize", "--model", p(&bad), "--data", p(&corpus), "--data-format", "tokens", "--out", p(&target)];
    a.extend_from_slice(&["--steps", "3", "--schedule", "exp:t=4,K=2"]);
    let out = lowbit(&a);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // Bad thread count.
    let out = Command::new(env!("CARGO_BIN_EXE_lowbit"))
        .args(["eval-ppl", "--model", p(&fp), "--data", p(&corpus), "--data-format", "tokens"])
        .env("TSRQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablation_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, corpus) = tiny(dir.path());
    let csv = dir.path().join("ablate.csv");
    ok(&lowbit(&[
        "ablate-schedule", "--model", p(&fp), "--data", p(&corpus), "--data-format", "tokens", "--take", "2",
        "--eval-data", p(&corpus), "--group-size", "8", "--steps", "2", "--temperatures", "2,4",
        "--iterations", "2", "--list", "list:50,100", "--out", p(&csv),
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 + 3, "{text}");
    assert!(text.lines().nth(1).unwrap().starts_with("fp,"));
}
