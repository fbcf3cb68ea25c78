mod common;

use std::fs;

use serde_json::Value;

use common::{fixture_corpus, p, run, small_run, stderr, stdout};

fn jsonl(path: &std::path::Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_then_evaluate_on_dev_reproduces_best_dev_f1() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), "");
    let o = run(&["train", "--config", p(&config)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("seed 13370\n"));
    let out = dir.path().join("out");
    for f in ["model.ckpt", "train_log.jsonl", "dev_report.txt", "dev_report.json", "test_report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let log = jsonl(&out.join("train_log.jsonl"));
    assert_eq!(log[0]["seed"], 13370);
    assert!(log[0]["started_unix"].is_u64());
    let epochs = &log[1..log.len() - 1];
    assert!(!epochs.is_empty() && epochs.len() <= 4);
    assert!(epochs[0]["train_loss"]["worthiness"].is_f64());
    let best = log.last().unwrap()["best_dev_f1"].as_f64().unwrap();

    let reports = dir.path().join("reports");
    let o = run(&[
        "evaluate",
        "--checkpoint",
        p(&out.join("model.ckpt")),
        "--test",
        p(&dir.path().join("dev.jsonl")),
        "--report-dir",
        p(&reports),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("average (macro)"));
    let r: Value = serde_json::from_str(&fs::read_to_string(reports.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["macro_f1"].as_f64().unwrap(), best);
    assert!(fs::read_to_string(reports.join("report.txt")).unwrap().contains("background"));
}

#[test]
fn lambda_zero_tasks_are_logged_as_untrained() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), "lambda_section = 0.0");
    let o = run(&["train", "--config", p(&config), "--train.max_epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = jsonl(&dir.path().join("out/train_log.jsonl"));
    assert_eq!(log.len(), 3);
    assert!(log[1]["train_loss"]["section"].is_null());
    assert!(log[1]["train_loss"]["intent"].is_f64());
}

#[test]
fn predict_writes_records_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), "");
    assert!(run(&["train", "--config", p(&config), "--train.max_epochs", "1"]).status.success());
    fs::write(
        dir.path().join("input.jsonl"),
        "{\"id\": \"a/1\", \"string\": \"n1 k0x0 n2\"}\n{\"id\": \"b\", \"string\": \"n3 n4\", \"label\": \"method\"}\n",
    )
    .unwrap();
    let heat = dir.path().join("heat");
    let out = dir.path().join("pred/out.jsonl");
    let o = run(&[
        "predict",
        "--checkpoint",
        p(&dir.path().join("out/model.ckpt")),
        "--input",
        p(&dir.path().join("input.jsonl")),
        "--out",
        p(&out),
        "--attention",
        p(&heat),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = jsonl(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["id"], "a/1");
    let probs = rows[0]["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 3);
    assert!((probs.values().map(|v| v.as_f64().unwrap()).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(rows[1]["gold"], "method");
    assert!(rows[0].get("gold").is_none());

    let rec: Value = serde_json::from_str(&fs::read_to_string(heat.join("a_1.json")).unwrap()).unwrap();
    let w: Vec<f64> = rec["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(w.len(), 3);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(fs::read_to_string(heat.join("b.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn gen_scaffolds_counts_match_fixture_labels() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-scaffolds", "--corpus", p(&fixture_corpus()), "--out-dir", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["sentences"], 60);
    assert_eq!(stats["worthiness"]["labels"]["true"], 30);
    assert_eq!(stats["worthiness"]["labels"]["false"], 30);
    assert_eq!(stats["section"]["total"], 26);
    assert_eq!(stats["section"]["labels"]["related work"], 10);
    assert_eq!(jsonl(&dir.path().join("worthiness.jsonl")).len(), 60);
    let section = jsonl(&dir.path().join("section.jsonl"));
    assert_eq!(section.len(), 26);
    assert!(section.iter().all(|r| r["string"].is_string() && r["label"].is_string()));

    let only = tempfile::tempdir().unwrap();
    let o = run(&[
        "gen-scaffolds",
        "--corpus",
        p(&fixture_corpus()),
        "--out-dir",
        p(only.path()),
        "--task",
        "section",
    ]);
    assert!(o.status.success());
    assert!(!only.path().join("worthiness.jsonl").exists());
    assert!(only.path().join("section.jsonl").exists());
}

#[test]
fn aggregate_keeps_confident_instances() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    fs::write(
        &gold,
        "{\"question_id\": \"q1\", \"label\": \"method\"}\n{\"question_id\": \"q2\", \"label\": \"result\"}\n",
    )
    .unwrap();
    let mut anns = String::new();
    for w in ["w1", "w2", "w3"] {
        anns += &format!("{{\"instance_id\": \"q1\", \"worker_id\": \"{w}\", \"choice\": \"method\"}}\n");
        anns += &format!("{{\"instance_id\": \"q2\", \"worker_id\": \"{w}\", \"choice\": \"result\"}}\n");
        anns += &format!("{{\"instance_id\": \"x1\", \"worker_id\": \"{w}\", \"choice\": \"background\"}}\n");
    }
    // Disqualified worker whose answers must not count.
    anns += "{\"instance_id\": \"q1\", \"worker_id\": \"bad\", \"choice\": \"result\"}\n";
    anns += "{\"instance_id\": \"x2\", \"worker_id\": \"bad\", \"choice\": \"method\"}\n";
    for (w, c) in [("w1", "method"), ("w2", "method"), ("w3", "background")] {
        anns += &format!("{{\"instance_id\": \"x3\", \"worker_id\": \"{w}\", \"choice\": \"{c}\"}}\n");
    }
    let ann_path = dir.path().join("ann.jsonl");
    fs::write(&ann_path, anns).unwrap();
    let out = dir.path().join("kept.jsonl");
    let o = run(&["aggregate", "--annotations", p(&ann_path), "--gold", p(&gold), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kept = jsonl(&out);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0]["id"], "x1");
    assert_eq!(kept[0]["confidence"], 1.0);
    let stats: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("kept.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["discarded_low_confidence"], 1);
    assert_eq!(stats["stats"]["no_qualified_annotations"], 1);
    assert_eq!(stats["workers"]["bad"]["qualified"], false);
}

#[test]
fn gradcheck_ops_passes() {
    let o = run(&["gradcheck", "--scope", "ops"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
    assert!(stdout(&o).contains("matmul") || stdout(&o).lines().count() > 10);
}

#[test]
fn grid_writes_surface() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), "");
    let o = run(&[
        "grid",
        "--config",
        p(&config),
        "--step",
        "0.1",
        "--max",
        "0.1",
        "--mode",
        "axis-aligned",
        "--train.max_epochs=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/grid.json")).unwrap()).unwrap();
    // (0,0), (0.1,0), then (best λ₂, 0.1).
    assert_eq!(grid["points"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("out/grid.txt").is_file());
}

#[test]
fn errors_are_single_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), "");
    fs::remove_file(dir.path().join("dev.jsonl")).unwrap();
    let o = run(&["train", "--config", p(&config)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("dev.jsonl"), "{err}");
    assert!(!dir.path().join("out").exists());

    let config = small_run(dir.path(), "");
    let o = run(&["train", "--config", p(&config), "--train.no_such_key", "1"]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).lines().count(), 1);

    fs::write(dir.path().join("train.jsonl"), "{\"string\": \"x\", \"label\": \"nonsense\"}\n").unwrap();
    let o = run(&["train", "--config", p(&config)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("train.jsonl:1") && err.contains("nonsense"), "{err}");
}
