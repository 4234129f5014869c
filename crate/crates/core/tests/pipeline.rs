use std::fs;
use std::path::{Path, PathBuf};

use kzone::pipeline::{
    load_manifest, report, run, DatasetSpec, MetricRow, ProviderKind, RunConfig, StageName, BUNDLE_FILES,
};
use kzone::synthetic::{blob_corpus, BlobSpec};
use kzone::Error;

fn dataset(dir: &Path, tag: &str, seed: u64) -> DatasetSpec {
    let blobs = blob_corpus(&BlobSpec {
        tag: tag.into(),
        n_docs: 150,
        n_blobs: 3,
        noise: 0.6,
        seed,
        ..BlobSpec::default()
    })
    .unwrap();
    DatasetSpec {
        manifest: blobs.save(dir).unwrap(),
        tag: None,
    }
}

fn config(dir: &Path, datasets: Vec<DatasetSpec>, k_max: usize) -> RunConfig {
    RunConfig {
        datasets,
        k_min: 2,
        k_max,
        sample_size: 50,
        output_dir: dir.join("out"),
        workers: 2,
        ..RunConfig::default()
    }
}

fn unit_file(cfg: &RunConfig, tag: &str, k: usize, name: &str) -> PathBuf {
    cfg.output_dir.join(format!("units/{tag}/k{k:03}/{name}"))
}

#[test]
fn single_k_sweep_yields_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![dataset(dir.path(), "solo", 1)], 2);
    run(&cfg, StageName::Evaluate).unwrap();
    let rows: Vec<MetricRow> =
        serde_json::from_str(&fs::read_to_string(unit_file(&cfg, "solo", 2, "metrics.json")).unwrap()).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["gmm", "random"]);
    for row in &rows {
        assert_eq!((row.dataset.as_str(), row.k, row.n_sampled), ("solo", 2, 50));
        assert!(row.ami.is_some() && row.accuracy.is_some());
        assert!(row.complexity_bits >= 0.0 && row.complexity_bits <= 1.0 + 1e-12);
    }
}

#[test]
fn rerun_reuses_completed_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![dataset(dir.path(), "resume", 2)], 3);
    let first = run(&cfg, StageName::Cluster).unwrap();
    assert_eq!(first.executed, ["resume/k002:cluster", "resume/k003:cluster"]);
    let model = fs::read(unit_file(&cfg, "resume", 2, "gmm.model")).unwrap();

    let second = run(&cfg, StageName::Report).unwrap();
    assert_eq!(second.reused, ["resume/k002:cluster", "resume/k003:cluster"]);
    assert!(second.executed.iter().all(|l| !l.ends_with(":cluster")));
    assert!(second.executed.contains(&"goldilocks".to_string()));
    assert_eq!(fs::read(unit_file(&cfg, "resume", 2, "gmm.model")).unwrap(), model);

    let third = run(&cfg, StageName::Regression).unwrap();
    assert!(third.executed.is_empty(), "{:?}", third.executed);
    assert_eq!(third.reused.len(), 2 * 5 + 2);
}

#[test]
fn changed_settings_invalidate_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), vec![dataset(dir.path(), "fp", 3)], 2);
    run(&cfg, StageName::Density).unwrap();
    cfg.density.target = 500;
    let again = run(&cfg, StageName::Density).unwrap();
    assert_eq!(again.reused, ["fp/k002:cluster"]);
    assert_eq!(again.executed, ["fp/k002:density"]);

    cfg.master_seed = 99;
    let reseeded = run(&cfg, StageName::Cluster).unwrap();
    assert_eq!(reseeded.executed, ["fp/k002:cluster"]);
}

#[test]
fn damaged_artifacts_are_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![dataset(dir.path(), "dmg", 4)], 2);
    run(&cfg, StageName::Cluster).unwrap();
    let labels = unit_file(&cfg, "dmg", 2, "gmm.labels");
    let original = fs::read(&labels).unwrap();
    fs::write(&labels, b"garbage").unwrap();
    let again = run(&cfg, StageName::Cluster).unwrap();
    assert_eq!(again.executed, ["dmg/k002:cluster"]);
    assert_eq!(fs::read(&labels).unwrap(), original);
}

#[test]
fn two_datasets_produce_full_metric_grid_and_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![dataset(dir.path(), "one", 5), dataset(dir.path(), "two", 6)], 5);
    let outcome = run(&cfg, StageName::Report).unwrap();
    assert!(outcome.manifest.incomplete_stages().is_empty());
    assert_eq!(outcome.manifest.datasets, ["one", "two"]);
    let report_dir = cfg.output_dir.join("report");
    for f in BUNDLE_FILES {
        assert!(report_dir.join(f).is_file(), "{f} missing");
    }
    let mut metrics = csv::Reader::from_path(report_dir.join("metrics.csv")).unwrap();
    let headers = metrics.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = metrics.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 4 * 2);
    let dataset_col = headers.iter().position(|h| h == "dataset").unwrap();
    assert_eq!(rows.iter().filter(|r| &r[dataset_col] == "two").count(), 8);
    let zone = fs::read_to_string(report_dir.join("zone.csv")).unwrap();
    assert!(zone.lines().count() >= 1);
    assert!(cfg.output_dir.join("names_export.jsonl").is_file());
}

#[test]
fn report_refuses_incomplete_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), vec![dataset(dir.path(), "part", 7)], 3);
    run(&cfg, StageName::Goldilocks).unwrap();
    match report(&cfg.output_dir) {
        Err(Error::IncompleteStages(missing)) => assert_eq!(missing, ["regression"]),
        other => panic!("expected incomplete stages, got {other:?}"),
    }
    let manifest = load_manifest(&cfg.output_dir).unwrap();
    assert!(manifest.global.get("goldilocks").is_some_and(|s| s.complete));
}

#[test]
fn identical_configs_give_identical_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![dataset(dir.path(), "det", 8)];
    let mut a = config(dir.path(), data.clone(), 4);
    a.output_dir = dir.path().join("a");
    let mut b = a.clone();
    b.output_dir = dir.path().join("b");
    b.workers = 1;
    run(&a, StageName::Report).unwrap();
    run(&b, StageName::Report).unwrap();
    for f in BUNDLE_FILES {
        assert_eq!(
            fs::read(a.output_dir.join("report").join(f)).unwrap(),
            fs::read(b.output_dir.join("report").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_round_trips_and_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
k_min = 3
k_max = 9
master_seed = 12

[[datasets]]
manifest = "data/tw.json"

[provider]
kind = "mock"
mock = { kind = "fixed", value = "Sports" }
"#;
    let path = dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.k_min, cfg.k_max, cfg.master_seed), (3, 9, 12));
    assert_eq!(cfg.datasets[0].manifest, dir.path().join("data/tw.json"));
    assert_eq!(cfg.output_dir, dir.path().join("kzone-out"));
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    cfg.validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = config(dir.path(), vec![dataset(dir.path(), "bad", 9)], 3);
    let mut low = base.clone();
    low.k_min = 1;
    assert!(matches!(low.validate(), Err(Error::Config(_))));
    let mut http = base.clone();
    http.provider.kind = ProviderKind::Http;
    assert!(matches!(http.validate(), Err(Error::Config(_))));
    let mut empty = base;
    empty.datasets.clear();
    assert!(matches!(run(&empty, StageName::Cluster), Err(Error::Config(_))));
    assert!(RunConfig::from_toml("k_min = \"two\"").is_err());
}
