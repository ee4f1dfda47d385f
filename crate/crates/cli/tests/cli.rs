use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 11
heldout_fraction = 0.2

[data]
n_users = 20
n_items = 40
n_attributes = 10
n_dialogues = 40

[rec.train]
epochs = 1
batch_size = 16

[lm.model]
layers = 1
hidden = 8
heads = 2
ffn = 16
max_len = 48
dropout = 0.1

[lm.train]
epochs = 1
batch_size = 16

[classifier.model]
layers = 1
hidden = 8
heads = 2
ffn = 16
max_len = 48
dropout = 0.1

[classifier.train]
epochs = 1
batch_size = 16

[eval]
max_turns = 30
bench_tokens = 40
bench_warmup = 1

[eval.decode]
max_new_tokens = 6
"#;

fn conkd(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conkd"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// The last stderr line, parsed as the error record.
fn error_of(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let reports: Vec<(String, Vec<u8>)> = ["a", "b"]
        .iter()
        .map(|run| {
            let out = dir.path().join(run);
            ok(conkd(&cfg, &out, &["gen-data"]));
            ok(conkd(&cfg, &out, &["train-rec"]));
            ok(conkd(&cfg, &out, &["train-dial", "--special-tokens"]));
            ok(conkd(&cfg, &out, &["train-classifier"]));
            ok(conkd(&cfg, &out, &["train-student", "--variant", "+D&R&ST"]));
            let student = out.join("student_plus_dr_st.ckpt");
            let eval = ok(conkd(
                &cfg,
                &out,
                &[
                    "evaluate",
                    "--model",
                    student.to_str().unwrap(),
                    "--classifier",
                    out.join("classifier.ckpt").to_str().unwrap(),
                    "--rec",
                    out.join("rec_teacher.ckpt").to_str().unwrap(),
                ],
            ));
            assert!(eval.contains("R@1") && eval.contains("F1@1"), "{eval}");
            let bench = ok(conkd(&cfg, &out, &["bench", "--model", student.to_str().unwrap()]));
            assert!(bench.trim().ends_with(" ms/token"), "{bench}");
            let metrics = std::fs::read_to_string(out.join("student_plus_dr_st.metrics.json")).unwrap();
            let records = std::fs::read_to_string(out.join("student_plus_dr_st.records.jsonl")).unwrap();
            assert_eq!(records.lines().count(), 30);
            (metrics, std::fs::read(student).unwrap())
        })
        .collect();
    assert_eq!(reports[0].0, reports[1].0);
    assert_eq!(reports[0].1, reports[1].1);
    let m: serde_json::Value = serde_json::from_str(&reports[0].0).unwrap();
    assert_eq!(m["ks"], serde_json::json!([1, 10, 50]));
    assert_eq!(m["recall"].as_array().unwrap().len(), 3);
}

#[test]
fn ablate_writes_one_report_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("abl");
    let table = ok(conkd(&cfg, &out, &["ablate", "--variants", "vanilla,+R", "--seeds", "3,4"]));
    assert!(table.contains("vanilla") && table.contains("+R"), "{table}");
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = reports.as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, [3, 4]);
}

#[test]
fn failures_exit_nonzero_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("empty");

    let o = conkd(&cfg, &out, &["train-rec"]);
    let e = error_of(&o);
    assert_eq!(e["error"], "invalid_argument");
    assert!(e["message"].as_str().unwrap().contains("gen-data"));

    ok(conkd(&cfg, &out, &["gen-data"]));
    let o = conkd(&cfg, &out, &["train-student", "--variant", "+D"]);
    assert!(error_of(&o)["message"].as_str().unwrap().contains("dial_plain.ckpt"));
    let o = conkd(&cfg, &out, &["train-student", "--variant", "+Q"]);
    assert_eq!(error_of(&o)["error"], "invalid_argument");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[lm.train]\nepochs = -1\n").unwrap();
    assert_eq!(error_of(&conkd(&bad, &out, &["gen-data"]))["error"], "config");

    let o = Command::new(env!("CARGO_BIN_EXE_conkd")).args(["--out", out.to_str().unwrap(), "gen-data"]).output().unwrap();
    assert_eq!(error_of(&o)["error"], "config");
    let o = Command::new(env!("CARGO_BIN_EXE_conkd")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["error"], "usage");
}

#[test]
fn serve_refuses_a_mismatched_recommender() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    ok(conkd(&cfg, &a, &["gen-data"]));
    ok(conkd(&cfg, &a, &["train-dial"]));
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("n_items = 40", "n_items = 30")).unwrap();
    let b = dir.path().join("b");
    ok(conkd(&other, &b, &["gen-data"]));
    ok(conkd(&other, &b, &["train-rec"]));
    let o = conkd(
        &cfg,
        &a,
        &[
            "serve",
            "--student",
            a.join("dial_plain.ckpt").to_str().unwrap(),
            "--rec",
            b.join("rec_teacher.ckpt").to_str().unwrap(),
            "--port",
            "0",
        ],
    );
    let e = error_of(&o);
    assert_eq!(e["error"], "checkpoint");
    assert!(e["message"].as_str().unwrap().contains("items"));
}
