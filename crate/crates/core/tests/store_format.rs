//! Stores written byte-by-byte the way an external exporter would, without
//! going through this crate's writer.

use std::fs;
use std::path::{Path, PathBuf};

use kzone::corpus::load_dataset;
use kzone::llm::{read_jsonl, ClassificationRecord};
use kzone::pipeline::{run, DatasetSpec, NameEmbeddingSource, RunConfig, StageName};
use kzone::synthetic::{blob_corpus, BlobSpec};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn write_store(dir: &Path, stem: &str, rows: &[(String, String, Vec<f32>)], tag: &str) -> PathBuf {
    let d = rows[0].2.len();
    let bytes: Vec<u8> = rows.iter().flat_map(|(_, _, v)| v.iter().flat_map(|x| x.to_le_bytes())).collect();
    fs::write(dir.join(format!("{stem}.f32")), &bytes).unwrap();
    let docs: String = rows
        .iter()
        .map(|(id, text, _)| format!("{}\n", json!({"id": id, "text": text, "dataset_tag": tag})))
        .collect();
    fs::write(dir.join(format!("{stem}.documents.jsonl")), docs).unwrap();
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let manifest = json!({
        "format": "kzone-embeddings/1",
        "n": rows.len(),
        "d": d,
        "checksum": format!("sha256:{digest}"),
        "matrix": format!("{stem}.f32"),
        "documents": format!("{stem}.documents.jsonl"),
    });
    let path = dir.join(format!("{stem}.manifest.json"));
    fs::write(&path, manifest.to_string()).unwrap();
    path
}

#[test]
fn externally_written_store_loads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        ("u1".to_string(), "climbing 🧗 and coffee".to_string(), vec![0.5f32, -1.25, 3.0]),
        ("u2".to_string(), "jazz records".to_string(), vec![1e-3, 2.0, -0.75]),
    ];
    let path = write_store(dir.path(), "handmade", &rows, "tw");
    let (corpus, store) = load_dataset(&path).unwrap();
    assert_eq!(corpus.len(), 2);
    assert_eq!(corpus.docs()[0].text, "climbing 🧗 and coffee");
    assert_eq!(store.row_of("u2").unwrap(), &[1e-3f32, 2.0, -0.75][..]);
    assert_eq!(store.dim(), 3);
}

#[test]
fn name_store_feeds_cosine_features() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = blob_corpus(&BlobSpec {
        tag: "ns".into(),
        n_docs: 90,
        n_blobs: 3,
        dim: 4,
        seed: 21,
        ..BlobSpec::default()
    })
    .unwrap();
    let mut cfg = RunConfig {
        datasets: vec![DatasetSpec {
            manifest: blobs.save(dir.path()).unwrap(),
            tag: None,
        }],
        k_min: 2,
        k_max: 2,
        sample_size: 30,
        output_dir: dir.path().join("out"),
        ..RunConfig::default()
    };
    run(&cfg, StageName::Name).unwrap();

    // embed each exported name as a fixed vector derived from its position
    let exported: Vec<Value> = read_jsonl(cfg.output_dir.join("names_export.jsonl")).unwrap();
    assert!(!exported.is_empty());
    let name_rows: Vec<(String, String, Vec<f32>)> = exported
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let name = doc["id"].as_str().unwrap().to_string();
            let v = vec![1.0, i as f32 + 1.0, -(i as f32), 0.5];
            (name.clone(), name, v)
        })
        .collect();
    let name_manifest = write_store(dir.path(), "names", &name_rows, "names");
    cfg.name_embeddings = NameEmbeddingSource::Store {
        manifest: name_manifest,
    };
    run(&cfg, StageName::Evaluate).unwrap();

    let (_, bios) = load_dataset(&cfg.datasets[0].manifest).unwrap();
    let records: Vec<ClassificationRecord> =
        read_jsonl(cfg.output_dir.join("units/ns/k002/records-gmm.jsonl")).unwrap();
    assert_eq!(records.len(), 30);
    for r in &records {
        let bio: Vec<f64> = bios.row_of(&r.doc_id).unwrap().iter().map(|&x| f64::from(x)).collect();
        let name = &name_rows.iter().find(|(id, _, _)| id == &r.true_name).unwrap().2;
        let dot: f64 = bio.iter().zip(name).map(|(a, &b)| a * f64::from(b)).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let name64: Vec<f64> = name.iter().map(|&x| f64::from(x)).collect();
        let want = dot / (norm(&bio) * norm(&name64));
        let got = r.cos_correct;
        assert!((got - want).abs() < 1e-6, "{}: {got} vs {want}", r.doc_id);
    }
}
