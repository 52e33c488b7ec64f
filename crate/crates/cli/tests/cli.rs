//! End-to-end command tests: exit codes, error messages, file contracts.

use std::path::Path;
use std::process::{Command, Output};

fn preflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_preflab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen_small(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen", "--prompts", "4", "--vocab", "16", "--records", "48", "--seed", "3",
    ];
    args.extend_from_slice(extra);
    args.push("--out");
    let out_str = out.to_str().unwrap();
    args.push(out_str);
    let result = preflab(&args);
    assert!(
        result.status.success(),
        "gen failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
}

#[test]
fn test_missing_output_dir_names_path() {
    let result = preflab(&["gen", "--out", "/nonexistent/preflab-nowhere"]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("/nonexistent/preflab-nowhere"), "{stderr}");
}

#[test]
fn test_unknown_flag_is_config_error() {
    let result = preflab(&["train", "--bogus-flag", "1"]);
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn test_help_exits_zero() {
    let result = preflab(&["--help"]);
    assert_eq!(result.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&result.stdout).contains("certify"));
}

#[test]
fn test_degenerate_scheme_never_references_y_star() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(
        dir.path(),
        &["--scheme", "degenerate", "--y-star", "5", "--n-strong", "1"],
    );
    let text = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    for line in text.lines().skip(1) {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_ne!(record["winner_id"], 5);
        assert!(record["strong"]
            .as_array()
            .unwrap()
            .iter()
            .all(|v| v != &serde_json::json!(5)));
    }
}

#[test]
fn test_train_zero_steps_reproduces_reference_logits() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), &["--n-strong", "1"]);
    let run = dir.path().join("run");
    std::fs::create_dir(&run).unwrap();
    let result = preflab(&[
        "train",
        "--world",
        dir.path().join("world.json").to_str().unwrap(),
        "--dataset",
        dir.path().join("dataset.jsonl").to_str().unwrap(),
        "--loss",
        "dpo",
        "--steps",
        "0",
        "--batch-size",
        "8",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(result.status.success());

    let world: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("world.json")).unwrap())
            .unwrap();
    let policy: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("policy.json")).unwrap()).unwrap();
    assert_eq!(world["reference_logits"], policy["logits"]);
}

#[test]
fn test_train_shape_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    // Default best-of-4 keeps 3 strong negatives per record.
    gen_small(dir.path(), &[]);
    let run = dir.path().join("run");
    std::fs::create_dir(&run).unwrap();
    let result = preflab(&[
        "train",
        "--world",
        dir.path().join("world.json").to_str().unwrap(),
        "--dataset",
        dir.path().join("dataset.jsonl").to_str().unwrap(),
        "--loss",
        "dpo",
        "--steps",
        "5",
        "--batch-size",
        "8",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("strong negative"), "{stderr}");
}

#[test]
fn test_tampered_dataset_hash_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), &["--n-strong", "1"]);
    let dataset_path = dir.path().join("dataset.jsonl");
    // Flip the first hash digit so the recorded hash no longer matches.
    let original = std::fs::read_to_string(&dataset_path).unwrap();
    let mut lines: Vec<String> = original.lines().map(String::from).collect();
    let flipped = if lines[0].contains("\"world_hash\":\"f") {
        lines[0].replacen("\"world_hash\":\"f", "\"world_hash\":\"0", 1)
    } else {
        let idx = lines[0].find("\"world_hash\":\"").unwrap() + "\"world_hash\":\"".len();
        let mut s = lines[0].clone();
        s.replace_range(idx..idx + 1, "f");
        s
    };
    lines[0] = flipped;
    let tampered = lines.join("\n") + "\n";
    std::fs::write(&dataset_path, tampered).unwrap();

    let run = dir.path().join("run");
    std::fs::create_dir(&run).unwrap();
    let result = preflab(&[
        "train",
        "--world",
        dir.path().join("world.json").to_str().unwrap(),
        "--dataset",
        dataset_path.to_str().unwrap(),
        "--loss",
        "dpo",
        "--steps",
        "5",
        "--batch-size",
        "8",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&result.stderr).contains("world_hash"));
}

#[test]
fn test_certify_only_subset() {
    let dir = tempfile::tempdir().unwrap();
    let result = preflab(&[
        "certify",
        "--only",
        "reductions",
        "--seed",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("certificates.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["certificates"].as_array().unwrap().len(), 1);
    assert_eq!(report["all_pass"], serde_json::json!(true));
}

#[test]
fn test_certify_unknown_name_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let result = preflab(&[
        "certify",
        "--only",
        "nonsense",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn test_frontier_cross_product_rows() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), &["--k", "2", "--n-strong", "1"]);
    let out = dir.path().join("frontier");
    std::fs::create_dir(&out).unwrap();
    let result = preflab(&[
        "frontier",
        "--world",
        dir.path().join("world.json").to_str().unwrap(),
        "--dataset",
        dir.path().join("dataset.jsonl").to_str().unwrap(),
        "--methods",
        "dpo,epa",
        "--betas",
        "0.01,0.05,0.1,0.5",
        "--n-weak",
        "2",
        "--steps",
        "40",
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let csv = std::fs::read_to_string(out.join("frontier.csv")).unwrap();
    // Digest comment + header + 2 methods x 4 betas.
    assert_eq!(csv.lines().count(), 2 + 8);
    // Repeat run: identical CSV.
    let again = preflab(&[
        "frontier",
        "--world",
        dir.path().join("world.json").to_str().unwrap(),
        "--dataset",
        dir.path().join("dataset.jsonl").to_str().unwrap(),
        "--methods",
        "dpo,epa",
        "--betas",
        "0.01,0.05,0.1,0.5",
        "--n-weak",
        "2",
        "--steps",
        "40",
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(again.status.success());
    assert_eq!(csv, std::fs::read_to_string(out.join("frontier.csv")).unwrap());
}

#[test]
fn test_config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("gen.json");
    std::fs::write(
        &config_path,
        r#"{"prompts": 4, "vocab": 16, "records": 24, "k": 4, "n_strong": 1, "seed": 9}"#,
    )
    .unwrap();
    let result = preflab(&[
        "gen",
        "--config",
        config_path.to_str().unwrap(),
        "--records",
        "12",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    // Flag overrides the config file's record count.
    let dataset = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(dataset.lines().count(), 1 + 12);
    // The effective config records the merged values.
    let effective: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("gen_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(effective["config"]["records"], serde_json::json!(12));
    assert_eq!(effective["config"]["prompts"], serde_json::json!(4));
    assert!(effective["config_digest"].is_string());
}
