use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lldd_core::degrade::DegradationSpec;
use lldd_core::phantom::{cohort_from_container, generate_cohort, CohortSpec};
use lldd_core::spg::{DistilledState, SpgConfig};
use lldd_core::tds::TdsContainer;
use lldd_core::Tensor;
use serde_json::{json, Value};

fn lldd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lldd"))
        .args(args)
        .env_remove("LLDD_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lldd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny cohort and fast settings for pipeline tests.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let doc = json!({
        "cohort": {"patients": 4, "slices_per_patient": 6, "height": 32, "width": 32},
        "spg": {"nri": 2, "ipp": 2},
        "distill": {"steps": 2},
        "coreset": {"method": "herding", "budget": 3, "feature_downsample": 8},
        "eval": {"test_patients": 1, "train": {"epochs": 2}},
        "seeds": {"seed": 11}
    });
    fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn phantom_gen_is_reproducible_and_records_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a.tds"), dir.path().join("b.tds"));
    ok(&["phantom-gen", "--config", s(&config), "--out", s(&a)]);
    ok(&["phantom-gen", "--config", s(&config), "--out", s(&b)]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"LLDD");
    assert_eq!(bytes, fs::read(&b).unwrap());

    let record: Value = serde_json::from_slice(&fs::read(dir.path().join("a.tds.run.json")).unwrap()).unwrap();
    let seeds = record["seeds"].as_object().unwrap();
    assert!(seeds.values().all(|v| v.is_u64()), "unresolved seed in {seeds:?}");
    assert_eq!(record["cohort"]["seed"], record["seeds"]["cohort"]);

    // replaying the recorded config reproduces the cohort
    let c = dir.path().join("c.tds");
    ok(&["phantom-gen", "--config", s(&dir.path().join("a.tds.run.json")), "--out", s(&c)]);
    assert_eq!(bytes, fs::read(&c).unwrap());
}

#[test]
fn seed_env_overrides_top_level_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let a = dir.path().join("a.tds");
    let b = dir.path().join("b.tds");
    ok(&["phantom-gen", "--config", s(&config), "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_lldd"))
        .args(["phantom-gen", "--config", s(&config), "--out", s(&b)])
        .env("LLDD_SEED", "12")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let record: Value = serde_json::from_slice(&fs::read(dir.path().join("b.tds.run.json")).unwrap()).unwrap();
    assert_eq!(record["seeds"]["seed"], 12);

    let bad = Command::new(env!("CARGO_BIN_EXE_lldd"))
        .args(["config"])
        .env("LLDD_SEED", "twelve")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn pipeline_distill_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let cohort = dir.path().join("cohort.tds");
    let test = dir.path().join("test.tds");
    let state = dir.path().join("state.tds");
    ok(&["phantom-gen", "--config", s(&config), "--out", s(&cohort), "--test-pairs", s(&test)]);
    ok(&["distill", "--config", s(&config), "--cohort", s(&cohort), "--out", s(&state)]);
    assert!(dir.path().join("state.tds.json").exists());
    let losses = fs::read_to_string(dir.path().join("state.tds.loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3, "{losses}");

    let model = dir.path().join("model.tds");
    ok(&["train", "--config", s(&config), "--data", s(&state), "--out", s(&model)]);
    let out = ok(&["eval", "--model", s(&model), "--testset", s(&test)]);
    let metrics: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["psnr"].as_f64().unwrap() > 5.0);
    assert!(metrics["ssim"].as_f64().unwrap() <= 1.0);

    let selection = dir.path().join("sel.json");
    ok(&["select", "--config", s(&config), "--cohort", s(&cohort), "--method", "k_center", "--out", s(&selection)]);
    let sel: Value = serde_json::from_slice(&fs::read(&selection).unwrap()).unwrap();
    assert_eq!(sel["slices"].as_array().unwrap().len(), 3);
    // the held-out patient (id 3) never appears in a selection
    assert!(sel["slices"].as_array().unwrap().iter().all(|r| r["patient_id"] != 3));
    let model2 = dir.path().join("model2.tds");
    ok(&["train", "--config", s(&config), "--data", s(&selection), "--cohort", s(&cohort), "--out", s(&model2)]);
    ok(&["eval", "--model", s(&model2), "--testset", s(&test)]);

    let shared = dir.path().join("shared");
    ok(&["export", "--config", s(&config), "--state", s(&state), "--outdir", s(&shared), "--samples", "2"]);
    for f in ["pairs.tds", "gradients.csv", "previews/previews.json", "config.json"] {
        assert!(shared.join(f).exists(), "missing {f}");
    }
    let grads = fs::read_to_string(shared.join("gradients.csv")).unwrap();
    assert_eq!(grads.lines().count(), 1 + 3 * 2);
    let previews: Value = serde_json::from_slice(&fs::read(shared.join("previews/previews.json")).unwrap()).unwrap();
    assert_eq!(previews.as_array().unwrap().len(), 3 * 2 * 2);
    let first = &previews[0];
    let pgm = fs::read(shared.join("previews").join(first["file"].as_str().unwrap())).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 32 * 32);
    assert!(first["min"].as_f64().unwrap() <= first["max"].as_f64().unwrap());

    // no exported tensor plane equals a raw cohort slice
    let raw = cohort_from_container(&TdsContainer::load(&cohort).unwrap()).unwrap();
    let pairs = TdsContainer::load(shared.join("pairs.tds")).unwrap();
    for name in ["x", "y"] {
        let t: Tensor<f32> = pairs.require(name).unwrap();
        for i in 0..t.shape()[0] {
            let plane = t.index_axis0(i).unwrap();
            for p in &raw {
                for k in 0..p.slice_count() {
                    assert_ne!(plane.data(), p.slice(k).unwrap().data(), "{name}[{i}] is a raw slice");
                }
            }
        }
    }
}

#[test]
fn zero_step_distillation_keeps_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"cohort": {"patients": 3, "slices_per_patient": 4, "height": 32, "width": 32},
            "distill": {"steps": 0}, "spg": {"nri": 2}, "eval": {"test_patients": 1}}"#,
    )
    .unwrap();
    let out = dir.path().join("a.tds");
    ok(&["distill", "--config", s(&config), "--out", s(&out)]);
    let record: Value = serde_json::from_slice(&fs::read(dir.path().join("a.tds.run.json")).unwrap()).unwrap();
    let spec: CohortSpec = serde_json::from_value(record["cohort"].clone()).unwrap();
    let spg: SpgConfig = serde_json::from_value(record["spg"].clone()).unwrap();
    let degradation: DegradationSpec = serde_json::from_value(record["degradation"].clone()).unwrap();
    let train: Vec<_> = generate_cohort(&spec).unwrap().into_iter().take(2).collect();
    let fresh = DistilledState::<f32>::init(&train, &spg, &degradation, record["seeds"]["distill"].as_u64().unwrap()).unwrap();
    assert_eq!(DistilledState::<f32>::load(&out).unwrap(), fresh);
}

#[test]
fn errors_are_json_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();

    let schema = dir.path().join("bad.json");
    fs::write(&schema, r#"{"cohort": {"patients": 4}, "unknown": true}"#).unwrap();
    let out = lldd(&["config", "--config", s(&schema)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "schema");

    let garbage = dir.path().join("garbage.tds");
    fs::write(&garbage, b"LLDX\x01\x00\x00\x00").unwrap();
    let model = dir.path().join("m.tds");
    let out = lldd(&["distill", "--cohort", s(&garbage), "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "format");

    let overlap = dir.path().join("overlap.json");
    fs::write(
        &overlap,
        r#"{"cohort": {"patients": 3, "slices_per_patient": 4, "height": 32, "width": 32},
            "eval": {"test_patient_ids": [2], "train_patient_ids": [1, 2]}}"#,
    )
    .unwrap();
    let out = lldd(&["select", "--config", s(&overlap), "--out", s(&dir.path().join("s.json"))]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"], "overlap");

    let out = lldd(&["eval", "--model", s(&dir.path().join("missing.tds")), "--testset", s(&garbage)]);
    assert_eq!(out.status.code(), Some(6));

    let out = lldd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn smoke_experiment_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("report");
    let out = ok(&["--threads", "1", "experiment", "--smoke", "--outdir", s(&outdir)]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("Ours"), "{table}");
    for f in ["report.csv", "report.txt", "report.json", "config.json"] {
        assert!(outdir.join(f).exists(), "missing {f}");
    }
    let report: Value = serde_json::from_slice(&fs::read(outdir.join("report.json")).unwrap()).unwrap();
    let methods: std::collections::BTreeSet<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    for m in ["Full", "Random", "Random*", "Uniform", "Herding", "K-Center", "Ours", "Ours†", "Ours‡"] {
        assert!(methods.contains(m), "missing row {m}");
    }
    let test_ids = report["test_patient_ids"].as_array().unwrap();
    assert!(report["train_patient_ids"].as_array().unwrap().iter().all(|id| !test_ids.contains(id)));
    let csv = fs::read_to_string(outdir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report["rows"].as_array().unwrap().len());
}
