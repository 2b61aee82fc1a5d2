//! End-to-end runs of the `tagllm` binary: plan files, annotation
//! determinism and resume, cost accounting, evaluation, exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tagllm_core::partition::{validate_partition, PartitionPlan};
use tagllm_core::testing::{MockChatServer, ScriptedResponse};

fn tagllm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tagllm"))
}

fn run(args: &[&str]) -> Output {
    tagllm().args(args).output().expect("binary runs")
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_vocab(dir: &Path, names: &[&str]) -> PathBuf {
    let path = dir.join("vocab.tsv");
    let mut text = String::new();
    for (i, name) in names.iter().enumerate() {
        text.push_str(&format!("{i}\t{name}\n"));
    }
    std::fs::write(&path, text).unwrap();
    path
}

fn small_names() -> Vec<String> {
    (0..12).map(|i| format!("thing{i:02}")).collect()
}

fn write_manifest(dir: &Path, n: usize, names: &[String]) -> PathBuf {
    let q = names.len();
    let path = dir.join("manifest.jsonl");
    let mut text = String::new();
    for i in 0..n {
        let labels = [names[i % q].clone(), names[(i * 5 + 2) % q].clone()];
        let mut labels: Vec<String> = labels.into();
        labels.dedup();
        text.push_str(
            &serde_json::json!({
                "image_id": format!("img-{i:03}"),
                "image_ref": format!("img-{i:03}.jpg"),
                "labels": labels,
            })
            .to_string(),
        );
        text.push('\n');
    }
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn partition_randp_writes_a_valid_plan() {
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = (0..80).map(|i| format!("cat{i:02}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = write_vocab(dir.path(), &name_refs);
    let out = dir.path().join("plan.json");
    let output = run(&[
        "partition",
        "--vocab",
        vocab.to_str().unwrap(),
        "--strategy",
        "randp",
        "--m",
        "8",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&output);
    let plan = PartitionPlan::load(&out).unwrap();
    assert_eq!(plan.m(), 8);
    assert!(validate_partition(&plan, 80).is_valid());

    // same invocation, byte-identical plan
    let bytes = std::fs::read(&out).unwrap();
    let out2 = dir.path().join("plan2.json");
    let output = run(&[
        "partition",
        "--vocab",
        vocab.to_str().unwrap(),
        "--strategy",
        "randp",
        "--m",
        "8",
        "--seed",
        "7",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_success(&output);
    assert_eq!(bytes, std::fs::read(&out2).unwrap());
}

#[test]
fn partition_coop_from_matrix_groups_cooccurring_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["person", "car", "dog", "cat"]);
    // matrix rows deliberately not in vocabulary order
    let matrix = dir.path().join("co.json");
    std::fs::write(
        &matrix,
        serde_json::json!({
            "names": ["dog", "cat", "person", "car"],
            "counts": [
                [8.0, 8.0, 0.0, 0.0],
                [8.0, 8.0, 0.0, 0.0],
                [0.0, 0.0, 10.0, 10.0],
                [0.0, 0.0, 10.0, 10.0]
            ]
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("plan.json");
    let output = run(&[
        "partition",
        "--vocab",
        vocab.to_str().unwrap(),
        "--strategy",
        "coop",
        "--m",
        "2",
        "--matrix",
        matrix.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&output);
    let plan = PartitionPlan::load(&out).unwrap();
    let mut groups = plan.groups().to_vec();
    groups.sort();
    assert_eq!(groups, vec![vec![0, 1], vec![2, 3]]);
}

#[test]
fn partition_http_failure_exits_2_without_partial_file() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["person", "car", "dog", "cat"]);
    let out = dir.path().join("plan.json");
    let output = run(&[
        "partition",
        "--vocab",
        vocab.to_str().unwrap(),
        "--strategy",
        "coop",
        "--backend",
        "http",
        "--endpoint",
        "http://127.0.0.1:9", // nothing listens on the discard port
        "--model",
        "m",
        "--max-retries",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(!out.exists(), "no partial plan file may be left behind");
}

#[test]
fn partition_via_scripted_http_reply() {
    let server = MockChatServer::start();
    server.push(ScriptedResponse::ok("Group 1: person, car\nGroup 2: dog, cat"));
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["person", "car", "dog", "cat"]);
    let out = dir.path().join("plan.json");
    let output = run(&[
        "partition",
        "--vocab",
        vocab.to_str().unwrap(),
        "--strategy",
        "coop",
        "--backend",
        "http",
        "--endpoint",
        &server.endpoint(),
        "--model",
        "m",
        "--m",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&output);
    let plan = PartitionPlan::load(&out).unwrap();
    assert_eq!(plan.groups(), &[vec![0, 1], vec![2, 3]]);
    // the request carried the partition instruction and the class list
    let body = &server.bodies()[0];
    assert!(body.contains("divide these 4 categories into 2 groups"), "{body}");
}

fn annotate_sim(dir: &Path, vocab: &Path, manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "annotate",
        "--vocab",
        vocab.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--backend",
        "sim",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let _ = dir;
    run(&args)
}

#[test]
fn annotate_is_deterministic_across_runs_and_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let names = small_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = write_vocab(dir.path(), &name_refs);
    let manifest = write_manifest(dir.path(), 30, &names);
    let profile = dir.path().join("profile.json");
    std::fs::write(
        &profile,
        r#"{"seed": 5, "binary": {"tpr": 0.9, "fpr": 0.02}, "multi_option": {"tpr": 0.95, "fpr": 0.1}}"#,
    )
    .unwrap();

    let out1 = dir.path().join("a.jsonl");
    let out2 = dir.path().join("b.jsonl");
    for (out, parallelism) in [(&out1, "1"), (&out2, "4")] {
        let output = annotate_sim(
            dir.path(),
            &vocab,
            &manifest,
            out,
            &[
                "--mode",
                "tagllm",
                "--seed",
                "1",
                "--sim-profile",
                profile.to_str().unwrap(),
                "--parallelism",
                parallelism,
            ],
        );
        assert_success(&output);
    }
    assert_eq!(
        std::fs::read(&out1).unwrap(),
        std::fs::read(&out2).unwrap(),
        "same seed must produce byte-identical outputs"
    );
}

#[test]
fn annotate_bp_costs_q_queries_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let names = small_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = write_vocab(dir.path(), &name_refs);
    let manifest = write_manifest(dir.path(), 10, &names);
    let out = dir.path().join("bp.jsonl");
    let output = annotate_sim(dir.path(), &vocab, &manifest, &out, &["--mode", "bp"]);
    assert_success(&output);
    let cost: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bp.cost.json")).unwrap())
            .unwrap();
    assert_eq!(cost["mean_stage2_queries"], 12.0);
    assert_eq!(cost["mean_stage1_queries"], 0.0);
    assert_eq!(cost["total_queries"], 120);
    assert_eq!(cost["baseline_queries"], 120);
}

#[test]
fn annotate_resumes_to_an_identical_file() {
    let dir = tempfile::tempdir().unwrap();
    let names = small_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = write_vocab(dir.path(), &name_refs);
    let manifest = write_manifest(dir.path(), 24, &names);

    let full = dir.path().join("full.jsonl");
    let output = annotate_sim(dir.path(), &vocab, &manifest, &full, &["--mode", "tagllm"]);
    assert_success(&output);
    let reference = std::fs::read_to_string(&full).unwrap();

    // fake an interrupted run: the first 9 records already on disk
    let resumed = dir.path().join("resumed.jsonl");
    let partial: String = reference.lines().take(9).map(|l| format!("{l}\n")).collect();
    std::fs::write(&resumed, partial).unwrap();
    let output = annotate_sim(dir.path(), &vocab, &manifest, &resumed, &["--mode", "tagllm"]);
    assert_success(&output);
    assert_eq!(reference, std::fs::read_to_string(&resumed).unwrap());
}

#[test]
fn eval_oracle_annotations_score_100() {
    let dir = tempfile::tempdir().unwrap();
    let names = small_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = write_vocab(dir.path(), &name_refs);
    let manifest = write_manifest(dir.path(), 40, &names);
    let out = dir.path().join("oracle.jsonl");
    // the default sim profile is the perfect oracle
    let output = annotate_sim(dir.path(), &vocab, &manifest, &out, &["--mode", "tagllm"]);
    assert_success(&output);

    let report_path = dir.path().join("report.json");
    let csv_path = dir.path().join("per_class.csv");
    let output = run(&[
        "eval",
        "--vocab",
        vocab.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--annotations",
        out.to_str().unwrap(),
        "--compat-ap",
        "--top-k",
        "3",
        "--per-class-csv",
        csv_path.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_success(&output);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 13, "header plus one row per class");
    assert!(csv.lines().nth(1).unwrap().starts_with("0,thing00,100.0000,100.0000,100.0000"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["op", "or", "of1", "cp", "cr", "cf1"] {
        assert_eq!(report[key], 100.0, "{key}");
    }
    assert_eq!(report["map"], 1.0);
    assert_eq!(report["top_k"].as_array().unwrap().len(), 3);
    // cost summary is passed through from the annotate run
    assert_eq!(report["cost"]["images"], 40);
}

#[test]
fn eval_reproduces_known_f1_from_confusion_totals() {
    // one class, totals chosen to land on OP 65.63 / OR 94.75
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["person"]);
    let mut manifest = String::new();
    let mut annotations = String::new();
    let mut image = 0;
    let mut push = |truth: bool, predicted: bool, n: usize, image: &mut u64| {
        for _ in 0..n {
            let id = format!("img-{image:05}");
            *image += 1;
            let labels: Vec<&str> = if truth { vec!["person"] } else { vec![] };
            manifest.push_str(
                &serde_json::json!({"image_id": id, "image_ref": "x.jpg", "labels": labels})
                    .to_string(),
            );
            manifest.push('\n');
            let predicted_labels: Vec<&str> = if predicted { vec!["person"] } else { vec![] };
            annotations.push_str(
                &serde_json::json!({
                    "image_id": id,
                    "labels": predicted_labels,
                    "candidates": [],
                    "counts": {"stage1_queries": 0, "stage2_queries": 0},
                    "degraded": false
                })
                .to_string(),
            );
            annotations.push('\n');
        }
    };
    push(true, true, 6563, &mut image); // tp
    push(true, false, 364, &mut image); // fn
    push(false, true, 3437, &mut image); // fp
    let manifest_path = dir.path().join("gt.jsonl");
    let annotations_path = dir.path().join("ann.jsonl");
    std::fs::write(&manifest_path, manifest).unwrap();
    std::fs::write(&annotations_path, annotations).unwrap();

    let output = run(&[
        "eval",
        "--vocab",
        vocab.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--annotations",
        annotations_path.to_str().unwrap(),
    ]);
    assert_success(&output);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&output.stdout)).unwrap();
    let of1 = report["of1"].as_f64().unwrap();
    assert!((of1 - 77.54).abs() <= 0.02, "OF1 {of1}");
}

#[test]
fn eval_vocabulary_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["person"]);
    let manifest_path = dir.path().join("gt.jsonl");
    std::fs::write(
        &manifest_path,
        "{\"image_id\": \"a\", \"image_ref\": \"a.jpg\", \"labels\": [\"person\"]}\n",
    )
    .unwrap();
    let annotations_path = dir.path().join("ann.jsonl");
    std::fs::write(
        &annotations_path,
        "{\"image_id\": \"a\", \"labels\": [\"zeppelin\"], \"candidates\": [], \
         \"counts\": {\"stage1_queries\": 0, \"stage2_queries\": 0}, \"degraded\": false}\n",
    )
    .unwrap();
    let output = run(&[
        "eval",
        "--vocab",
        vocab.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--annotations",
        annotations_path.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3));

    // missing annotation for a manifest image is a validation failure too
    std::fs::write(&annotations_path, "").unwrap();
    let output = run(&[
        "eval",
        "--vocab",
        vocab.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--annotations",
        annotations_path.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn concepts_from_file_fills_identity_cards() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["orange", "apple", "zebra"]);
    let curated = dir.path().join("curated.jsonl");
    std::fs::write(
        &curated,
        "{\"category\": \"orange\", \"super_category\": \"fruit\", \"similar\": [\"apple\"], \
         \"description\": \"orange fruit (citrus)\", \"ambiguous\": true, \"tag\": \"sense_ambiguity\"}\n",
    )
    .unwrap();
    let out = dir.path().join("cache.jsonl");
    let output = run(&[
        "concepts",
        "--vocab",
        vocab.to_str().unwrap(),
        "--from-file",
        curated.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&output);
    let cache = std::fs::read_to_string(&out).unwrap();
    assert_eq!(cache.lines().count(), 3);
    assert!(cache.contains("orange fruit (citrus)"));
    assert!(cache.contains("\"category\":\"zebra\""));

    // a curated file violating card invariants is rejected
    std::fs::write(
        &curated,
        "{\"category\": \"orange\", \"super_category\": \"\", \"similar\": [], \
         \"description\": \"orange\", \"ambiguous\": false}\n",
    )
    .unwrap();
    let output = run(&[
        "concepts",
        "--vocab",
        vocab.to_str().unwrap(),
        "--from-file",
        curated.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!output.status.success());
}

#[test]
fn concepts_warm_cache_issues_no_queries() {
    let server = MockChatServer::start();
    server.set_default_content("No.");
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["orange", "apple"]);
    let out = dir.path().join("cache.jsonl");
    let http_args = [
        "--backend",
        "http",
        "--endpoint",
        &server.endpoint(),
        "--model",
        "m",
    ];
    let mut args = vec![
        "concepts",
        "--vocab",
        vocab.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(&http_args);
    let output = run(&args);
    assert_success(&output);
    assert_eq!(server.request_count(), 6, "three queries per category");

    let output = run(&args);
    assert_success(&output);
    assert_eq!(server.request_count(), 6, "warm cache must not re-query");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let names = small_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = write_vocab(dir.path(), &name_refs);
    let out = dir.path().join("plan.json");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "vocab": vocab.to_str().unwrap(),
            "strategy": "randp",
            "m": 3,
            "seed": 9
        })
        .to_string(),
    )
    .unwrap();
    // --m on the command line overrides the config's m = 3
    let output = run(&[
        "--config",
        config.to_str().unwrap(),
        "partition",
        "--m",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&output);
    let plan = PartitionPlan::load(&out).unwrap();
    assert_eq!(plan.m(), 4);

    // config typos are rejected
    std::fs::write(&config, r#"{"strategy": "bogus"}"#).unwrap();
    let output = run(&[
        "--config",
        config.to_str().unwrap(),
        "partition",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
}
