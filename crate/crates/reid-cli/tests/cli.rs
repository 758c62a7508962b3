//! Binary-level tests: composed subcommand runs, determinism, exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn reid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn synth_then_cluster_reports_count_and_ari() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["synth", "--preset", "easy", "--out", "d.emb", "--seed", "3"]);
    assert!(out.status.success());
    assert!(dir.path().join("d.emb").exists());

    let out = reid(
        dir.path(),
        &["cluster", "--in", "d.emb", "--epsilon", "0.4", "--min-pts", "4"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("clusters\t"), "{text}");
    assert!(text.contains("ari\t"), "{text}");
    let json_line = text.lines().last().unwrap();
    let summary: serde_json::Value = serde_json::from_str(json_line).unwrap();
    assert!(summary["clusters"].as_u64().unwrap() > 0);
    assert!(summary["ari"].is_number());
}

#[test]
fn eval_prints_map_and_ranks() {
    let dir = tempfile::tempdir().unwrap();
    assert!(reid(dir.path(), &["synth", "--preset", "easy", "--out", "g.emb", "--seed", "4"])
        .status
        .success());
    let out = reid(
        dir.path(),
        &["eval", "--query", "g.emb", "--gallery", "g.emb", "--normalize"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["mAP\t", "rank1\t", "rank5\t", "rank10\t"] {
        assert!(text.contains(key), "missing {key} in {text}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(summary["mAP"].is_number());
    assert_eq!(summary["num_queries"].as_u64().unwrap(), 160);
}

#[test]
fn quiet_mode_emits_only_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    assert!(reid(dir.path(), &["synth", "--preset", "easy", "--out", "g.emb", "--quiet"])
        .status
        .success());
    let out = reid(
        dir.path(),
        &["eval", "--query", "g.emb", "--gallery", "g.emb", "--normalize", "--quiet"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(serde_json::from_str::<serde_json::Value>(text.trim()).is_ok());
}

#[test]
fn training_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "train-vitc",
        "--preset",
        "camera-offset",
        "--seed",
        "11",
        "--epochs",
        "3",
        "--log",
        "run.jsonl",
    ];
    let first = reid(dir.path(), &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let first_log = std::fs::read(dir.path().join("run.jsonl")).unwrap();
    let second = reid(dir.path(), &args);
    assert!(second.status.success());
    let second_log = std::fs::read(dir.path().join("run.jsonl")).unwrap();
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(first_log, second_log);

    // a different seed must change the run
    let other = reid(
        dir.path(),
        &["train-vitc", "--preset", "camera-offset", "--seed", "12", "--epochs", "3"],
    );
    assert!(other.status.success());
    assert_ne!(first.stdout, other.stdout);
}

#[test]
fn rerank_lambda_one_matches_plain_metrics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(reid(dir.path(), &["synth", "--preset", "easy", "--out", "q.emb", "--seed", "7", "--samples-per-pair", "3"]).status.success());
    assert!(reid(dir.path(), &["synth", "--preset", "easy", "--out", "g.emb", "--seed", "7"])
        .status
        .success());
    let plain = reid(
        dir.path(),
        &["eval", "--query", "q.emb", "--gallery", "g.emb", "--normalize", "--quiet"],
    );
    let plain_summary: serde_json::Value =
        serde_json::from_str(stdout(&plain).trim()).unwrap();
    let reranked = reid(
        dir.path(),
        &[
            "rerank", "--query", "q.emb", "--gallery", "g.emb", "--normalize", "--quiet",
            "--k1", "8", "--k2", "3", "--lambda", "1.0",
        ],
    );
    assert!(reranked.status.success(), "{}", String::from_utf8_lossy(&reranked.stderr));
    let rerank_summary: serde_json::Value =
        serde_json::from_str(stdout(&reranked).trim()).unwrap();
    assert_eq!(plain_summary["mAP"], rerank_summary["mAP"]);
    assert_eq!(plain_summary["rank1"], rerank_summary["rank1"]);
}

#[test]
fn refine_writes_soft_labels() {
    let dir = tempfile::tempdir().unwrap();
    assert!(reid(dir.path(), &["synth", "--preset", "easy", "--out", "d.emb", "--seed", "5"])
        .status
        .success());
    let out = reid(
        dir.path(),
        &[
            "refine", "--in", "d.emb", "--epsilon", "0.4", "--min-pts", "4", "--alpha", "0.5",
            "--out", "labels.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert!(fields.len() > 2);
    // soft-label row sums to 1
    let sum: f64 = fields[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn io_roundtrip_self_test_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["io-roundtrip"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("roundtrip\tok"));
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["gradcheck", "--op", "kl_distill"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("kl_distill\tpass"));

    let out = reid(dir.path(), &["gradcheck", "--op", "bogus"]);
    assert_eq!(out.status.code(), Some(1), "unknown op is a user error");
}

#[test]
fn gradcheck_all_gates_on_every_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["gradcheck", "--all", "--quiet"]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["checked"], summary["passed"]);
    assert_eq!(summary["checked"].as_u64().unwrap(), 17);
}

#[test]
fn csv_import_feeds_every_file_consumer() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "label,camera,f0,f1\n0,0,0.1,0.2\n0,1,0.12,0.22\n0,0,0.11,0.19\n1,0,5.0,5.0\n1,1,5.1,4.9\n1,0,4.95,5.05\n";
    std::fs::write(dir.path().join("tiny.csv"), csv).unwrap();
    let out = reid(
        dir.path(),
        &["cluster", "--in", "tiny.csv", "--epsilon", "0.5", "--min-pts", "2", "--no-normalize", "--quiet"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["clusters"].as_u64().unwrap(), 2);
    assert_eq!(summary["ari"].as_f64().unwrap(), 1.0);
}

#[test]
fn user_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // missing file
    let out = reid(dir.path(), &["cluster", "--in", "missing.emb"]);
    assert_eq!(out.status.code(), Some(1));
    // corrupted magic
    std::fs::write(dir.path().join("bad.emb"), b"NOPE").unwrap();
    let out = reid(dir.path(), &["cluster", "--in", "bad.emb"]);
    assert_eq!(out.status.code(), Some(1));
    // bad usage
    let out = reid(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    // missing required data source
    let out = reid(dir.path(), &["train-scm"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "epochs": 2,
        "batch_p": 4,
        "batch_k": 4,
        "learning_rate": 0.05,
    });
    std::fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
    let out = reid(
        dir.path(),
        &["train-scm", "--preset", "easy", "--config", "run.json", "--seed", "2", "--quiet"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(stdout(&out).trim().lines().last().unwrap()).unwrap();
    assert!(summary["rank1"].is_number());
}
