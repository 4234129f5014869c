//! Corpora, embedding stores and their on-disk format.
//!
//! A store on disk is three files side by side:
//!
//! * `<stem>.manifest.json`: `n`, `d`, checksum and the relative paths of the
//!   two files below,
//! * `<stem>.f32`: the raw row-major matrix as little-endian `f32`, exactly
//!   `n * d * 4` bytes,
//! * `<stem>.documents.jsonl`: one document per line, line `i` describing
//!   matrix row `i`.
//!
//! The checksum is `sha256:<hex>` over the raw matrix bytes.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "kzone-embeddings/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub dataset_tag: String,
}

/// Documents in file order with unique ids.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "document `{}` has empty text",
                    doc.id
                )));
            }
            if index.insert(doc.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate document id `{}`", doc.id)));
            }
        }
        Ok(Corpus { docs, index })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.docs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Corpus::new(docs)
}

pub fn write_corpus<'a>(
    path: impl AsRef<Path>,
    docs: impl IntoIterator<Item = &'a Document>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("documents serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub n: usize,
    pub d: usize,
    pub checksum: String,
    pub matrix: PathBuf,
    pub documents: PathBuf,
}

pub fn checksum_bytes(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Row-aligned embedding matrix, `f32` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    checksum: String,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Alignment(format!(
                "{} ids but matrix holds {} values for d={dim}",
                ids.len(),
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate store id `{id}`")));
            }
            let row = &data[i * dim..(i + 1) * dim];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row for `{id}` has non-finite entries")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Validation(format!("row for `{id}` is all zero")));
            }
        }
        let checksum = checksum_bytes(&matrix_to_bytes(&data));
        Ok(EmbeddingStore {
            ids,
            dim,
            data,
            checksum,
            index,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(ids: Vec<String>, rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        Self::new(ids, dim, data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn matrix_bytes(&self) -> Vec<u8> {
        matrix_to_bytes(&self.data)
    }

    /// Widened copy for the numerical stages.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim), |(i, j)| {
            f64::from(self.data[i * self.dim + j])
        })
    }

    /// Reorders rows to follow `corpus` order. Both id sets must coincide.
    pub fn aligned_to(&self, corpus: &Corpus) -> Result<Self> {
        check_alignment(&self.ids, corpus)?;
        let mut ids = Vec::with_capacity(corpus.len());
        let mut data = Vec::with_capacity(self.data.len());
        for doc in corpus.docs() {
            let i = self.index[&doc.id];
            ids.push(doc.id.clone());
            data.extend_from_slice(self.row(i));
        }
        Self::new(ids, self.dim, data)
    }

    /// Writes manifest, matrix and documents files; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, corpus: &Corpus) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut docs = Vec::with_capacity(self.len());
        for id in &self.ids {
            let doc = corpus.get(id).ok_or_else(|| {
                Error::Alignment(format!("store id `{id}` missing from corpus"))
            })?;
            docs.push(doc);
        }
        let matrix_name = PathBuf::from(format!("{stem}.f32"));
        let docs_name = PathBuf::from(format!("{stem}.documents.jsonl"));
        let matrix_path = dir.join(&matrix_name);
        fs::write(&matrix_path, self.matrix_bytes()).map_err(|e| Error::io(&matrix_path, e))?;
        write_corpus(dir.join(&docs_name), docs)?;
        let manifest = StoreManifest {
            format: MANIFEST_FORMAT.to_string(),
            n: self.len(),
            d: self.dim,
            checksum: self.checksum.clone(),
            matrix: matrix_name,
            documents: docs_name,
        };
        let manifest_path = dir.join(format!("{stem}.manifest.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

fn matrix_to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn check_alignment(ids: &[String], corpus: &Corpus) -> Result<()> {
    let present: HashSet<&str> = ids.iter().map(String::as_str).collect();
    if let Some(missing) = corpus.docs().iter().find(|d| !present.contains(d.id.as_str())) {
        return Err(Error::Alignment(format!(
            "corpus id `{}` missing from embedding store ({} rows for {} documents)",
            missing.id,
            ids.len(),
            corpus.len()
        )));
    }
    if let Some(extra) = ids.iter().find(|id| corpus.get(id).is_none()) {
        return Err(Error::Alignment(format!("store id `{extra}` missing from corpus")));
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<StoreManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: StoreManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Validation(format!(
            "unsupported manifest format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads the store and checks it against `corpus`. Rows keep manifest order.
pub fn load_embeddings(manifest_path: impl AsRef<Path>, corpus: &Corpus) -> Result<EmbeddingStore> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let matrix_path = base.join(&manifest.matrix);
    let bytes = fs::read(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
    let expected_len = manifest.n * manifest.d * 4;
    if bytes.len() != expected_len {
        return Err(Error::Integrity(format!(
            "matrix is {} bytes, expected n*d*4 = {expected_len}",
            bytes.len()
        )));
    }
    let actual = checksum_bytes(&bytes);
    if actual != manifest.checksum {
        return Err(Error::Integrity(format!(
            "checksum mismatch: manifest {} but matrix hashes to {actual}",
            manifest.checksum
        )));
    }
    let listed = load_corpus(base.join(&manifest.documents))?;
    if listed.len() != manifest.n {
        return Err(Error::Alignment(format!(
            "manifest declares {} rows but documents file lists {}",
            manifest.n,
            listed.len()
        )));
    }
    let ids: Vec<String> = listed.docs().iter().map(|d| d.id.clone()).collect();
    check_alignment(&ids, corpus)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingStore::new(ids, manifest.d, data)
}

/// Loads a store together with the documents file its manifest names.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(Corpus, EmbeddingStore)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let corpus = load_corpus(base.join(&manifest.documents))?;
    let store = load_embeddings(manifest_path, &corpus)?;
    Ok((corpus, store))
}

/// Cosine similarity with `f64` accumulation.
pub fn cosine<A, B>(u: &[A], v: &[B]) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b): (f64, f64) = (a.into(), b.into());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}
