//! Seeded synthetic corpora and regression rows for tests, demos and smoke runs.
//!
//! Blob corpora place documents around Gaussian centers. Each embedding
//! coordinate owns a vocabulary word and a document's text lists the words
//! of its largest coordinates, so clusters found in embedding space carry
//! matching keywords. Vocabulary words are pairwise at least four edits apart.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, EmbeddingStore};
use crate::error::Result;
use crate::llm::levenshtein;
use crate::regression::{sigmoid, FeatureRow};
use crate::seed::{rng_from, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub tag: String,
    pub n_docs: usize,
    pub n_blobs: usize,
    pub dim: usize,
    /// Standard deviation of center coordinates.
    pub separation: f64,
    /// Standard deviation of per-document noise.
    pub noise: f64,
    pub words_per_doc: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            tag: "synthetic".into(),
            n_docs: 1000,
            n_blobs: 5,
            dim: 16,
            separation: 1.0,
            noise: 0.3,
            words_per_doc: 4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlobCorpus {
    pub corpus: Corpus,
    pub store: EmbeddingStore,
    pub truth: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub vocabulary: Vec<String>,
}

impl BlobCorpus {
    /// Writes `<tag>.f32`, `<tag>.documents.jsonl` and `<tag>.manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let tag = self.corpus.docs()[0].dataset_tag.clone();
        self.store.save(dir, &tag, &self.corpus)
    }
}

/// `n` lowercase words, pairwise Levenshtein distance at least 4.
pub fn vocabulary(n: usize, seed: u64) -> Vec<String> {
    let mut rng = substream(seed, 0x766f63);
    let mut words: Vec<String> = Vec::with_capacity(n);
    while words.len() < n {
        let w: String = (0..7)
            .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
            .collect();
        if words.iter().all(|v| levenshtein(v, &w) >= 4) {
            words.push(w);
        }
    }
    words
}

pub fn blob_corpus(spec: &BlobSpec) -> Result<BlobCorpus> {
    let mut rng = rng_from(spec.seed);
    let vocab = vocabulary(spec.dim, spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.n_blobs)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut docs = Vec::with_capacity(spec.n_docs);
    let mut rows = Vec::with_capacity(spec.n_docs);
    let mut truth = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let blob = i % spec.n_blobs;
        let row: Vec<f64> = centers[blob]
            .iter()
            .map(|&c| c + spec.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut order: Vec<usize> = (0..spec.dim).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let words: Vec<&str> = order
            .iter()
            .take(spec.words_per_doc.max(1))
            .map(|&j| vocab[j].as_str())
            .collect();
        docs.push(Document {
            id: format!("{}-{i:06}", spec.tag),
            text: format!("the {} and more", words.join(" ")),
            dataset_tag: spec.tag.clone(),
        });
        rows.push(row);
        truth.push(blob);
    }
    let ids = docs.iter().map(|d| d.id.clone()).collect();
    Ok(BlobCorpus {
        corpus: Corpus::new(docs)?,
        store: EmbeddingStore::from_rows(ids, &rows)?,
        truth,
        centers,
        vocabulary: vocab,
    })
}

/// Logistic regression rows with outcome drawn from
/// `sigmoid(b0 + b1 cc + b2 ci + b3 cc*ci + b4 K + dummy)`.
///
/// Datasets are `ref` plus `d1..` (one per entry of `dummy_coef`), assigned
/// round-robin. Cosines are uniform on [0.1, 0.9], K uniform on 2..=50.
pub fn simulate_feature_rows(
    base_coef: &[f64],
    dummy_coef: &[f64],
    n: usize,
    seed: u64,
) -> Vec<FeatureRow> {
    assert_eq!(base_coef.len(), 5, "five base coefficients");
    let mut rng = rng_from(seed);
    (0..n)
        .map(|i| {
            let cc = rng.random_range(0.1..0.9);
            let ci = rng.random_range(0.1..0.9);
            let k = rng.random_range(2..=50usize);
            let d = i % (dummy_coef.len() + 1);
            let tag = if d == 0 { "ref".to_string() } else { format!("d{d}") };
            let mut eta = base_coef[0]
                + base_coef[1] * cc
                + base_coef[2] * ci
                + base_coef[3] * cc * ci
                + base_coef[4] * k as f64;
            if d > 0 {
                eta += dummy_coef[d - 1];
            }
            let outcome = rng.random::<f64>() < sigmoid(eta);
            FeatureRow::new(cc, ci, k, tag, outcome)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_well_separated() {
        let v = vocabulary(40, 3);
        for i in 0..v.len() {
            for j in 0..i {
                assert!(levenshtein(&v[i], &v[j]) >= 4);
            }
        }
    }

    #[test]
    fn blob_corpus_is_deterministic_and_consistent() {
        let spec = BlobSpec {
            n_docs: 60,
            n_blobs: 3,
            ..BlobSpec::default()
        };
        let a = blob_corpus(&spec).unwrap();
        let b = blob_corpus(&spec).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_eq!(a.corpus.docs(), b.corpus.docs());
        assert_eq!(a.store.len(), 60);
        assert_eq!(a.truth.iter().filter(|&&t| t == 2).count(), 20);
    }

    #[test]
    fn saved_blobs_reload() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = blob_corpus(&BlobSpec {
            n_docs: 30,
            ..BlobSpec::default()
        })
        .unwrap();
        let manifest = blobs.save(dir.path()).unwrap();
        let (corpus, store) = crate::corpus::load_dataset(&manifest).unwrap();
        assert_eq!(corpus.docs(), blobs.corpus.docs());
        assert_eq!(store.checksum(), blobs.store.checksum());
    }
}
