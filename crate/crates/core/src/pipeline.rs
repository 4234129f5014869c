//! End-to-end sweep over datasets and cluster counts.
//!
//! Work is split into units, one per `(dataset, K)`, each running the stages
//! `cluster`, `density`, `name`, `classify` and `evaluate` in order. After a
//! barrier the `goldilocks` and `regression` stages aggregate across units and
//! `report` writes the CSV bundle.
//!
//! Every stage writes its artifacts under the output directory and records
//! their checksums in `manifest.json` together with a fingerprint of the
//! configuration and upstream artifacts it consumed. A stage is re-run only
//! if its fingerprint changed or an artifact no longer matches its checksum,
//! which makes interrupted sweeps resumable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use ndarray::Array2;

use crate::baseline::{random_assign, random_assign_proportional, BaselineMode};
use crate::corpus::{checksum_bytes, load_dataset, Corpus, Document, EmbeddingStore};
use crate::density::{semantic_density, DensityConfig, DensityReport};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, predict, read_labels, write_labels, write_model, GmmConfig};
use crate::goldilocks::{GoldilocksReport, MetricSeries, DEFAULT_MAX_GAP};
use crate::llm::{
    centroid_name_embeddings, classify_sample, mock_name_clusters, provider_name_clusters,
    read_jsonl, store_name_embeddings, token_mean_name_embeddings, write_jsonl, AuditLog,
    ClassificationRecord, ClassifyConfig, HttpProvider, MockClassifier, MockProvider,
    NamedClustering, Provider, RetryPolicy, DEFAULT_THRESHOLD,
};
use crate::metrics::{accuracy, ami, encoder_complexity, EncoderPolicy};
use crate::regression::{bin_correct_proportions, fit_logreg, BinnedProportions, FeatureRow, LogRegFit};
use crate::seed::derive_seed;

pub const RUN_FORMAT: &str = "kzone-run/1";
pub const METHODS: [&str; 2] = ["gmm", "random"];

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Path to an embedding-store manifest.
    pub manifest: PathBuf,
    /// Defaults to the documents' common tag, else the manifest stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub mock: MockClassifier,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: None,
            mock: MockClassifier::NearestName,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
        }
    }
}

/// Where cluster-name embeddings for the cosine features come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NameEmbeddingSource {
    /// Mean embedding of each cluster's members.
    Centroid,
    /// Mean over the name's tokens of the mean embedding of documents containing each token.
    #[default]
    TokenMean,
    /// An embedding store whose document ids are the cluster names.
    Store { manifest: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub datasets: Vec<DatasetSpec>,
    pub k_min: usize,
    pub k_max: usize,
    pub master_seed: u64,
    pub gmm: GmmConfig,
    pub baseline: BaselineMode,
    pub density: DensityConfig,
    pub sample_size: usize,
    pub threshold: usize,
    pub naming_samples: usize,
    pub name_embeddings: NameEmbeddingSource,
    pub provider: ProviderConfig,
    pub max_gap: usize,
    /// Dataset left out of the regression dummies; defaults to the first tag in sorted order.
    pub reference_dataset: Option<String>,
    /// Concurrent units; 0 uses one per core.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub run_id: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: Vec::new(),
            k_min: 2,
            k_max: 50,
            master_seed: 0,
            gmm: GmmConfig::default(),
            baseline: BaselineMode::Uniform,
            density: DensityConfig::default(),
            sample_size: 1000,
            threshold: DEFAULT_THRESHOLD,
            naming_samples: 20,
            name_embeddings: NameEmbeddingSource::default(),
            provider: ProviderConfig::default(),
            max_gap: DEFAULT_MAX_GAP,
            reference_dataset: None,
            workers: 0,
            output_dir: PathBuf::from("kzone-out"),
            run_id: "kzone".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a TOML config; relative paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut cfg.datasets {
            resolve(&mut d.manifest);
        }
        if let NameEmbeddingSource::Store { manifest } = &mut cfg.name_embeddings {
            resolve(manifest);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if self.k_min < 2 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "need 2 <= k_min <= k_max, got {}..{}",
                self.k_min, self.k_max
            )));
        }
        if self.sample_size == 0 {
            return Err(Error::Config("sample_size must be at least 1".into()));
        }
        if self.threshold == 0 {
            return Err(Error::Config("threshold must be at least 1".into()));
        }
        if self.provider.kind == ProviderKind::Http && self.provider.endpoint.is_none() {
            return Err(Error::Config("http provider needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn k_values(&self) -> Vec<usize> {
        (self.k_min..=self.k_max).collect()
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Cluster,
    Density,
    Name,
    Classify,
    Evaluate,
    Goldilocks,
    Regression,
    Report,
}

impl StageName {
    pub const UNIT: [StageName; 5] = [
        StageName::Cluster,
        StageName::Density,
        StageName::Name,
        StageName::Classify,
        StageName::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Cluster => "cluster",
            StageName::Density => "density",
            StageName::Name => "name",
            StageName::Classify => "classify",
            StageName::Evaluate => "evaluate",
            StageName::Goldilocks => "goldilocks",
            StageName::Regression => "regression",
            StageName::Report => "report",
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    pub fingerprint: String,
    pub artifacts: BTreeMap<String, Artifact>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub dataset: String,
    pub k: usize,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub datasets: Vec<String>,
    pub units: BTreeMap<String, UnitRecord>,
    pub global: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(config: RunConfig) -> Self {
        RunManifest {
            format: RUN_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            datasets: Vec::new(),
            units: BTreeMap::new(),
            global: BTreeMap::new(),
        }
    }

    /// Stages required for a report that are not complete, by name.
    pub fn incomplete_stages(&self) -> Vec<String> {
        let mut missing = Vec::new();
        for tag in &self.datasets {
            for k in self.config.k_values() {
                let unit = self.units.get(&unit_key(tag, k));
                for stage in StageName::UNIT {
                    let done = unit
                        .and_then(|u| u.stages.get(stage.as_str()))
                        .is_some_and(|s| s.complete);
                    if !done {
                        missing.push(format!("{}:{stage}", unit_key(tag, k)));
                    }
                }
            }
        }
        for stage in [StageName::Goldilocks, StageName::Regression] {
            if !self.global.get(stage.as_str()).is_some_and(|s| s.complete) {
                missing.push(stage.as_str().to_string());
            }
        }
        missing
    }

    pub fn stage(&self, tag: &str, k: usize, stage: StageName) -> Option<&StageRecord> {
        self.units.get(&unit_key(tag, k))?.stages.get(stage.as_str())
    }
}

pub fn unit_key(tag: &str, k: usize) -> String {
    format!("{tag}/k{k:03}")
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join("manifest.json")
}

pub fn load_manifest(out: impl AsRef<Path>) -> Result<RunManifest> {
    let path = manifest_path(out.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(checksum_bytes(&bytes))
}

fn fingerprint(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

// ---------------------------------------------------------------------------
// per-unit artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPair {
    pub gmm: DensityReport,
    pub random: DensityReport,
}

impl DensityPair {
    pub fn get(&self, method: &str) -> &DensityReport {
        if method == "gmm" {
            &self.gmm
        } else {
            &self.random
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub k: usize,
    pub method: String,
    /// Between cluster labels and matched labels (UNMATCHED as its own label).
    pub ami: Option<f64>,
    pub accuracy: Option<f64>,
    pub complexity_bits: f64,
    pub n_sampled: usize,
    pub n_scored: usize,
    pub n_provider_errors: usize,
    pub n_unmatched: usize,
    pub density_mean: f64,
    pub density_sem_pairs: f64,
    pub density_sem_clusters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionArtifact {
    pub reference_dataset: String,
    pub n_rows: usize,
    pub fit: Option<LogRegFit>,
    /// Why the model could not be estimated, when it could not.
    pub not_estimable: Option<String>,
    pub bins: BinnedProportions,
}

pub fn metric_row(
    dataset: &str,
    k: usize,
    method: &str,
    labels: &[usize],
    named: &NamedClustering,
    records: &[ClassificationRecord],
    density: &DensityReport,
) -> Result<MetricRow> {
    let scored: Vec<&ClassificationRecord> = records.iter().filter(|r| !r.is_provider_error()).collect();
    let truth: Vec<usize> = scored.iter().map(|r| r.true_cluster).collect();
    let matched: Vec<usize> = scored.iter().map(|r| r.matched_label.unwrap_or(k)).collect();
    let ami_value = if scored.is_empty() { None } else { Some(ami(&truth, &matched)?) };
    let accuracy_value = match accuracy(records) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let policy = EncoderPolicy::from_clustering(labels, k, &named.names)?;
    Ok(MetricRow {
        dataset: dataset.to_string(),
        k,
        method: method.to_string(),
        ami: ami_value,
        accuracy: accuracy_value,
        complexity_bits: encoder_complexity(&policy),
        n_sampled: records.len(),
        n_scored: scored.len(),
        n_provider_errors: records.len() - scored.len(),
        n_unmatched: scored.iter().filter(|r| r.matched_label.is_none()).count(),
        density_mean: density.mean_sim,
        density_sem_pairs: density.sem_pairs,
        density_sem_clusters: density.sem_clusters,
    })
}

// ---------------------------------------------------------------------------
// runner

struct Dataset {
    tag: String,
    corpus: Corpus,
    store: EmbeddingStore,
    x: Array2<f64>,
}

fn load_datasets(specs: &[DatasetSpec]) -> Result<Vec<Dataset>> {
    let mut out: Vec<Dataset> = Vec::new();
    for spec in specs {
        let (corpus, store) = load_dataset(&spec.manifest)?;
        let tag = match &spec.tag {
            Some(t) => t.clone(),
            None => {
                let tags: BTreeSet<&str> = corpus.docs().iter().map(|d| d.dataset_tag.as_str()).collect();
                if tags.len() == 1 {
                    tags.into_iter().next().unwrap_or_default().to_string()
                } else {
                    let name = spec.manifest.file_name().and_then(|s| s.to_str()).unwrap_or("dataset");
                    name.trim_end_matches(".json").trim_end_matches(".manifest").to_string()
                }
            }
        };
        if tag.is_empty() || tag.contains('/') {
            return Err(Error::Config(format!("invalid dataset tag `{tag}`")));
        }
        if out.iter().any(|d| d.tag == tag) {
            return Err(Error::Config(format!("duplicate dataset tag `{tag}`")));
        }
        let x = store.to_array();
        out.push(Dataset { tag, corpus, store, x });
    }
    out.sort_by(|a, b| a.tag.cmp(&b.tag));
    Ok(out)
}

pub fn build_provider(cfg: &RunConfig, out: &Path) -> Result<Box<dyn Provider>> {
    match cfg.provider.kind {
        ProviderKind::Mock => Ok(Box::new(MockProvider::new(cfg.provider.mock.clone()))),
        ProviderKind::Http => {
            let endpoint = cfg
                .provider
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("http provider needs an endpoint".into()))?;
            let audit = AuditLog::open(out.join("audit.jsonl"))?;
            Ok(Box::new(
                HttpProvider::new(endpoint, cfg.provider.retry, cfg.provider.max_in_flight).with_audit(audit),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// `unit:stage` (or bare global stage) labels that were computed in this run.
    pub executed: Vec<String>,
    /// Labels of stages whose artifacts were reused.
    pub reused: Vec<String>,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    provider: Box<dyn Provider>,
    name_store: Option<EmbeddingStore>,
    manifest: Mutex<RunManifest>,
    executed: Mutex<Vec<String>>,
    reused: Mutex<Vec<String>>,
}

enum Scope<'a> {
    Unit(&'a str, usize),
    Global,
}

impl Scope<'_> {
    fn dir(&self) -> PathBuf {
        match self {
            Scope::Unit(tag, k) => PathBuf::from("units").join(tag).join(format!("k{k:03}")),
            Scope::Global => PathBuf::from("global"),
        }
    }

    fn label(&self, stage: StageName) -> String {
        match self {
            Scope::Unit(tag, k) => format!("{}:{stage}", unit_key(tag, *k)),
            Scope::Global => stage.as_str().to_string(),
        }
    }
}

type Artifacts = BTreeMap<String, Artifact>;

fn checksums(a: &Artifacts) -> BTreeMap<&str, &str> {
    a.iter().map(|(k, v)| (k.as_str(), v.checksum.as_str())).collect()
}

impl Runner<'_> {
    fn persist(&self, manifest: &RunManifest) -> Result<()> {
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&manifest_path(&self.out), text.as_bytes())
    }

    fn verified(&self, record: &StageRecord, fp: &str, names: &[&str]) -> bool {
        record.complete
            && record.fingerprint == fp
            && names.iter().all(|n| {
                record.artifacts.get(*n).is_some_and(|a| {
                    file_checksum(&self.out.join(&a.path)).is_ok_and(|c| c == a.checksum)
                })
            })
    }

    /// Reuses a stage when its fingerprint and artifacts still match, else runs `body`.
    fn stage(
        &self,
        scope: &Scope<'_>,
        stage: StageName,
        fp_input: serde_json::Value,
        names: &[&str],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<Artifacts> {
        let fp = fingerprint(&fp_input);
        let previous = {
            let m = self.manifest.lock().expect("manifest lock");
            match scope {
                Scope::Unit(tag, k) => m.stage(tag, *k, stage).cloned(),
                Scope::Global => m.global.get(stage.as_str()).cloned(),
            }
        };
        if let Some(rec) = previous.filter(|r| self.verified(r, &fp, names)) {
            self.reused.lock().expect("log lock").push(scope.label(stage));
            return Ok(rec.artifacts);
        }
        let rel = scope.dir();
        let dir = self.out.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let started = Instant::now();
        body(&dir)?;
        let mut artifacts = Artifacts::new();
        for n in names {
            let path = rel.join(n);
            artifacts.insert(
                n.to_string(),
                Artifact {
                    checksum: file_checksum(&self.out.join(&path))?,
                    path: path.to_string_lossy().replace('\\', "/"),
                },
            );
        }
        let record = StageRecord {
            complete: true,
            fingerprint: fp,
            artifacts: artifacts.clone(),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        {
            let mut m = self.manifest.lock().expect("manifest lock");
            match scope {
                Scope::Unit(tag, k) => {
                    m.units
                        .entry(unit_key(tag, *k))
                        .or_insert_with(|| UnitRecord {
                            dataset: tag.to_string(),
                            k: *k,
                            stages: BTreeMap::new(),
                        })
                        .stages
                        .insert(stage.as_str().to_string(), record);
                }
                Scope::Global => {
                    m.global.insert(stage.as_str().to_string(), record);
                }
            }
            self.persist(&m)?;
        }
        self.executed.lock().expect("log lock").push(scope.label(stage));
        Ok(artifacts)
    }

    fn name_embeddings(
        &self,
        ds: &Dataset,
        labels: &[usize],
        named: &NamedClustering,
    ) -> Result<Vec<Vec<f64>>> {
        match &self.cfg.name_embeddings {
            NameEmbeddingSource::Centroid => Ok(centroid_name_embeddings(&ds.store, labels, named.k)),
            NameEmbeddingSource::TokenMean => {
                token_mean_name_embeddings(&ds.corpus, &ds.store, labels, &named.names)
            }
            NameEmbeddingSource::Store { .. } => {
                let store = self
                    .name_store
                    .as_ref()
                    .ok_or_else(|| Error::Config("name embedding store not loaded".into()))?;
                store_name_embeddings(store, &named.names)
            }
        }
    }

    fn run_unit(&self, ds: &Dataset, k: usize, upto: StageName) -> Result<()> {
        let cfg = self.cfg;
        let scope = Scope::Unit(&ds.tag, k);
        let seed = |stage: &str| derive_seed(cfg.master_seed, &ds.tag, k, stage);
        let wrap = |stage: StageName| {
            let tag = ds.tag.clone();
            move |e: Error| Error::Stage {
                dataset: tag,
                k,
                stage: stage.as_str().into(),
                source: Box::new(e),
            }
        };
        let n = ds.corpus.len();

        let cluster = self
            .stage(
                &scope,
                StageName::Cluster,
                json!({ "store": ds.store.checksum(), "k": k, "seed": cfg.master_seed,
                        "gmm": cfg.gmm, "baseline": cfg.baseline }),
                &["gmm.model", "gmm.labels", "random.labels"],
                |dir| {
                    let model = fit_gmm(ds.x.view(), k, seed("gmm"), &cfg.gmm)?;
                    let labels = predict(&model, ds.x.view())?.labels;
                    let random = match cfg.baseline {
                        BaselineMode::Uniform => random_assign(n, k, seed("random"))?,
                        BaselineMode::Proportional => {
                            random_assign_proportional(&labels, k, seed("random"))?
                        }
                    };
                    write_model(dir.join("gmm.model"), &model)?;
                    write_labels(dir.join("gmm.labels"), &labels)?;
                    write_labels(dir.join("random.labels"), &random.labels)
                },
            )
            .map_err(wrap(StageName::Cluster))?;
        if upto == StageName::Cluster {
            return Ok(());
        }
        let labels_of = |dir: &Path, m: &str| read_labels(dir.join(format!("{m}.labels")));

        let density = self
            .stage(
                &scope,
                StageName::Density,
                json!({ "density": cfg.density, "cluster": checksums(&cluster) }),
                &["density.json"],
                |dir| {
                    let gmm = semantic_density(&ds.store, &labels_of(dir, "gmm")?, &cfg.density, seed("density-gmm"))?;
                    let random =
                        semantic_density(&ds.store, &labels_of(dir, "random")?, &cfg.density, seed("density-random"))?;
                    write_json(&dir.join("density.json"), &DensityPair { gmm, random })
                },
            )
            .map_err(wrap(StageName::Density))?;
        if upto == StageName::Density {
            return Ok(());
        }

        let naming_provider = match cfg.provider.kind {
            ProviderKind::Mock => "mock:keywords".to_string(),
            ProviderKind::Http => self.provider.id(),
        };
        let names = self
            .stage(
                &scope,
                StageName::Name,
                json!({ "provider": naming_provider, "samples": cfg.naming_samples,
                        "run_id": cfg.run_id, "cluster": checksums(&cluster) }),
                &["names-gmm.json", "names-random.json"],
                |dir| {
                    for m in METHODS {
                        let labels = labels_of(dir, m)?;
                        let s = seed(&format!("name-{m}"));
                        let named = match cfg.provider.kind {
                            ProviderKind::Mock => {
                                mock_name_clusters(&ds.corpus, &labels, k, s, cfg.naming_samples)?
                            }
                            ProviderKind::Http => provider_name_clusters(
                                self.provider.as_ref(),
                                &ds.corpus,
                                &labels,
                                k,
                                s,
                                cfg.naming_samples,
                                &cfg.run_id,
                            )?,
                        };
                        write_json(&dir.join(format!("names-{m}.json")), &named)?;
                    }
                    Ok(())
                },
            )
            .map_err(wrap(StageName::Name))?;
        if upto == StageName::Name {
            return Ok(());
        }

        let name_store_checksum = self.name_store.as_ref().map(|s| s.checksum().to_string());
        let classify = self
            .stage(
                &scope,
                StageName::Classify,
                json!({ "provider": self.provider.id(), "sample_size": cfg.sample_size,
                        "threshold": cfg.threshold, "run_id": cfg.run_id,
                        "name_embeddings": cfg.name_embeddings, "name_store": name_store_checksum,
                        "cluster": checksums(&cluster), "names": checksums(&names) }),
                &["raw-gmm.jsonl", "raw-random.jsonl", "records-gmm.jsonl", "records-random.jsonl"],
                |dir| {
                    let ccfg = ClassifyConfig {
                        sample_size: cfg.sample_size.min(n),
                        threshold: cfg.threshold,
                        seed: seed("classify"),
                        run_id: cfg.run_id.clone(),
                    };
                    for m in METHODS {
                        let labels = labels_of(dir, m)?;
                        let named: NamedClustering = read_json(&dir.join(format!("names-{m}.json")))?;
                        let embs = self.name_embeddings(ds, &labels, &named)?;
                        let run = classify_sample(
                            self.provider.as_ref(),
                            &ds.corpus,
                            &ds.store,
                            &labels,
                            &named,
                            &embs,
                            &ccfg,
                            Some(&dir.join(format!("raw-{m}.jsonl"))),
                        )?;
                        write_jsonl(dir.join(format!("records-{m}.jsonl")), &run.records)?;
                    }
                    Ok(())
                },
            )
            .map_err(wrap(StageName::Classify))?;
        if upto == StageName::Classify {
            return Ok(());
        }

        self.stage(
            &scope,
            StageName::Evaluate,
            json!({ "cluster": checksums(&cluster), "density": checksums(&density),
                    "names": checksums(&names), "classify": checksums(&classify) }),
            &["metrics.json"],
            |dir| {
                let pair: DensityPair = read_json(&dir.join("density.json"))?;
                let mut rows = Vec::new();
                for m in METHODS {
                    let labels = labels_of(dir, m)?;
                    let named: NamedClustering = read_json(&dir.join(format!("names-{m}.json")))?;
                    let records: Vec<ClassificationRecord> = read_jsonl(dir.join(format!("records-{m}.jsonl")))?;
                    rows.push(metric_row(&ds.tag, k, m, &labels, &named, &records, pair.get(m))?);
                }
                write_json(&dir.join("metrics.json"), &rows)
            },
        )
        .map_err(wrap(StageName::Evaluate))?;
        Ok(())
    }

    fn unit_artifact(&self, tag: &str, k: usize, stage: StageName, name: &str) -> Result<PathBuf> {
        let m = self.manifest.lock().expect("manifest lock");
        m.stage(tag, k, stage)
            .and_then(|s| s.artifacts.get(name))
            .map(|a| self.out.join(&a.path))
            .ok_or_else(|| Error::IncompleteStages(vec![format!("{}:{stage}", unit_key(tag, k))]))
    }

    fn unit_checksums(&self, datasets: &[Dataset], stage: StageName) -> BTreeMap<String, BTreeMap<String, String>> {
        let m = self.manifest.lock().expect("manifest lock");
        let mut out = BTreeMap::new();
        for ds in datasets {
            for k in self.cfg.k_values() {
                if let Some(s) = m.stage(&ds.tag, k, stage) {
                    out.insert(
                        unit_key(&ds.tag, k),
                        s.artifacts.iter().map(|(n, a)| (n.clone(), a.checksum.clone())).collect(),
                    );
                }
            }
        }
        out
    }

    fn goldilocks(&self, datasets: &[Dataset]) -> Result<Artifacts> {
        let cfg = self.cfg;
        self.stage(
            &Scope::Global,
            StageName::Goldilocks,
            json!({ "max_gap": cfg.max_gap, "metrics": self.unit_checksums(datasets, StageName::Evaluate) }),
            &["goldilocks.json"],
            |dir| {
                let rows = self.all_metric_rows(datasets)?;
                let report = goldilocks_from_rows(&rows, cfg.max_gap)?;
                write_json(&dir.join("goldilocks.json"), &report)
            },
        )
    }

    fn all_metric_rows(&self, datasets: &[Dataset]) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        for ds in datasets {
            for k in self.cfg.k_values() {
                let path = self.unit_artifact(&ds.tag, k, StageName::Evaluate, "metrics.json")?;
                rows.extend(read_json::<Vec<MetricRow>>(&path)?);
            }
        }
        Ok(rows)
    }

    fn regression(&self, datasets: &[Dataset]) -> Result<Artifacts> {
        let cfg = self.cfg;
        let reference = cfg
            .reference_dataset
            .clone()
            .unwrap_or_else(|| datasets[0].tag.clone());
        self.stage(
            &Scope::Global,
            StageName::Regression,
            json!({ "reference": reference, "records": self.unit_checksums(datasets, StageName::Classify) }),
            &["regression.json"],
            |dir| {
                let mut rows = Vec::new();
                for ds in datasets {
                    for k in cfg.k_values() {
                        let path = self.unit_artifact(&ds.tag, k, StageName::Classify, "records-gmm.jsonl")?;
                        for r in read_jsonl::<ClassificationRecord>(path)? {
                            if !r.is_provider_error() {
                                rows.push(FeatureRow::new(r.cos_correct, r.cos_best_incorrect, k, ds.tag.clone(), r.correct));
                            }
                        }
                    }
                }
                let artifact = regression_artifact(&rows, &reference)?;
                write_json(&dir.join("regression.json"), &artifact)
            },
        )
    }
}

/// Pooled regression plus the cosine-difference bins, tolerating degenerate data.
pub fn regression_artifact(rows: &[FeatureRow], reference: &str) -> Result<RegressionArtifact> {
    let diffs: Vec<f64> = rows.iter().map(|r| r.cos_correct - r.cos_incorrect).collect();
    let outcomes: Vec<bool> = rows.iter().map(|r| r.outcome).collect();
    let bins = bin_correct_proportions(&diffs, &outcomes, -0.4, 0.4, 0.01)?;
    let (fit, not_estimable) = match fit_logreg(rows, reference) {
        Ok(f) => (Some(f), None),
        Err(e @ (Error::Validation(_) | Error::RankDeficient { .. })) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(RegressionArtifact {
        reference_dataset: reference.to_string(),
        n_rows: rows.len(),
        fit,
        not_estimable,
        bins,
    })
}

/// Aggregates metric rows across datasets and builds the rank-crossing report.
/// K values where any dataset lacks a GMM or random value are left out.
pub fn goldilocks_from_rows(rows: &[MetricRow], max_gap: usize) -> Result<GoldilocksReport> {
    type PerK = BTreeMap<usize, (Vec<f64>, Vec<f64>)>;
    let mut by_unit: BTreeMap<(usize, &str), BTreeMap<&str, &MetricRow>> = BTreeMap::new();
    for r in rows {
        by_unit.entry((r.k, r.dataset.as_str())).or_default().insert(r.method.as_str(), r);
    }
    let mut ami_k: PerK = BTreeMap::new();
    let mut acc_k: PerK = BTreeMap::new();
    let mut incomplete: BTreeSet<usize> = BTreeSet::new();
    for ((k, _), methods) in &by_unit {
        let (Some(g), Some(r)) = (methods.get("gmm"), methods.get("random")) else {
            incomplete.insert(*k);
            continue;
        };
        match (g.ami, r.ami, g.accuracy, r.accuracy) {
            (Some(ga), Some(ra), Some(gc), Some(rc)) => {
                let e = ami_k.entry(*k).or_default();
                e.0.push(ga);
                e.1.push(ra);
                let e = acc_k.entry(*k).or_default();
                e.0.push(gc);
                e.1.push(rc);
            }
            _ => {
                incomplete.insert(*k);
            }
        }
    }
    for k in &incomplete {
        ami_k.remove(k);
        acc_k.remove(k);
    }
    let ami_series = MetricSeries::aggregate("ami", &ami_k)?;
    let acc_series = MetricSeries::aggregate("accuracy", &acc_k)?;
    GoldilocksReport::build(&ami_series, &acc_series, max_gap)
}

/// Writes every distinct cluster name as a JSON-lines corpus for an external encoder.
fn export_names(out: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let mut names: BTreeSet<String> = BTreeSet::new();
    for unit in manifest.units.values() {
        if let Some(stage) = unit.stages.get(StageName::Name.as_str()) {
            for a in stage.artifacts.values() {
                let named: NamedClustering = read_json(&out.join(&a.path))?;
                names.extend(named.names);
            }
        }
    }
    let docs: Vec<Document> = names
        .into_iter()
        .map(|n| Document {
            id: n.clone(),
            text: n,
            dataset_tag: "names".into(),
        })
        .collect();
    let path = out.join("names_export.jsonl");
    write_jsonl(&path, &docs)?;
    Ok(path)
}

/// Runs every stage up to and including `upto`, reusing completed work.
pub fn run(cfg: &RunConfig, upto: StageName) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let datasets = load_datasets(&cfg.datasets)?;
    let mut manifest = if manifest_path(&out).exists() {
        let m = load_manifest(&out)?;
        if m.format != RUN_FORMAT {
            return Err(Error::Validation(format!("unsupported run format `{}`", m.format)));
        }
        m
    } else {
        RunManifest::new(cfg.clone())
    };
    manifest.config = cfg.clone();
    manifest.datasets = datasets.iter().map(|d| d.tag.clone()).collect();

    let name_store = match (&cfg.name_embeddings, upto >= StageName::Classify) {
        (NameEmbeddingSource::Store { manifest }, true) => Some(load_dataset(manifest)?.1),
        _ => None,
    };
    let runner = Runner {
        cfg,
        provider: build_provider(cfg, &out)?,
        out: out.clone(),
        name_store,
        manifest: Mutex::new(manifest),
        executed: Mutex::new(Vec::new()),
        reused: Mutex::new(Vec::new()),
    };
    runner.persist(&runner.manifest.lock().expect("manifest lock"))?;

    let units: Vec<(&Dataset, usize)> = datasets
        .iter()
        .flat_map(|d| cfg.k_values().into_iter().map(move |k| (d, k)))
        .collect();
    let unit_upto = upto.min(StageName::Evaluate);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<()>> =
        pool.install(|| units.par_iter().map(|(d, k)| runner.run_unit(d, *k, unit_upto)).collect());
    results.into_iter().collect::<Result<Vec<()>>>()?;

    if upto >= StageName::Name {
        export_names(&out, &runner.manifest.lock().expect("manifest lock"))?;
    }
    if upto >= StageName::Goldilocks {
        runner.goldilocks(&datasets)?;
    }
    if upto >= StageName::Regression {
        runner.regression(&datasets)?;
    }
    let mut executed = runner.executed.into_inner().expect("log lock");
    let mut reused = runner.reused.into_inner().expect("log lock");
    let manifest = runner.manifest.into_inner().expect("manifest lock");
    if upto >= StageName::Report {
        report(&out)?;
        executed.push(StageName::Report.as_str().into());
    }
    executed.sort();
    reused.sort();
    let manifest = if upto >= StageName::Report { load_manifest(&out)? } else { manifest };
    Ok(RunOutcome {
        manifest,
        executed,
        reused,
    })
}

// ---------------------------------------------------------------------------
// report bundle

pub const BUNDLE_FILES: [&str; 8] = [
    "density.csv",
    "metrics.csv",
    "goldilocks.csv",
    "zone.csv",
    "regression.csv",
    "cosine_bins.csv",
    "cosine_diffs.csv",
    "summary.txt",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub zone: Option<(usize, usize)>,
}

#[derive(Serialize)]
struct DensityCsv<'a> {
    dataset: &'a str,
    k: usize,
    method: &'a str,
    n_pairs: usize,
    mean_sim: f64,
    sem_pairs: f64,
    sem_clusters: f64,
    n_singleton_skipped: usize,
}

#[derive(Serialize)]
struct GoldilocksCsv {
    k: usize,
    z_ami: f64,
    z_acc: f64,
    z_ami_flagged: bool,
    z_acc_flagged: bool,
    rank_ami: f64,
    rank_acc: f64,
    crossing: bool,
}

#[derive(Serialize)]
struct ZoneCsv {
    k_lo: Option<usize>,
    k_hi: Option<usize>,
    max_gap: usize,
    n_crossings: usize,
    crossings: String,
}

#[derive(Serialize)]
struct BinCsv {
    bin_lo: f64,
    bin_center: f64,
    proportion_correct: String,
    n_in_bin: usize,
    n_correct: usize,
}

#[derive(Serialize)]
struct DiffCsv<'a> {
    dataset: &'a str,
    k: usize,
    doc_id: &'a str,
    cos_correct: f64,
    cos_best_incorrect: f64,
    cos_difference: f64,
    correct: bool,
}

fn csv_file<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the CSV bundle and summary under `<output>/report/` from a complete run.
pub fn report(out: impl AsRef<Path>) -> Result<ReportBundle> {
    let out = out.as_ref();
    let mut manifest = load_manifest(out)?;
    let missing = manifest.incomplete_stages();
    if !missing.is_empty() {
        return Err(Error::IncompleteStages(missing));
    }
    let started = Instant::now();
    let dir = out.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let art = |tag: &str, k: usize, stage: StageName, name: &str| -> PathBuf {
        out.join(&manifest.stage(tag, k, stage).expect("complete").artifacts[name].path)
    };
    let ks = manifest.config.k_values();

    let mut density_rows = Vec::new();
    let mut metric_rows: Vec<MetricRow> = Vec::new();
    let mut diff_rows: Vec<(String, usize, ClassificationRecord)> = Vec::new();
    for tag in &manifest.datasets {
        for &k in &ks {
            let pair: DensityPair = read_json(&art(tag, k, StageName::Density, "density.json"))?;
            for m in METHODS {
                density_rows.push((tag.clone(), k, m, pair.get(m).clone()));
            }
            metric_rows.extend(read_json::<Vec<MetricRow>>(&art(tag, k, StageName::Evaluate, "metrics.json"))?);
            for r in read_jsonl::<ClassificationRecord>(art(tag, k, StageName::Classify, "records-gmm.jsonl"))? {
                if !r.is_provider_error() {
                    diff_rows.push((tag.clone(), k, r));
                }
            }
        }
    }
    metric_rows.sort_by(|a, b| (&a.dataset, a.k, &a.method).cmp(&(&b.dataset, b.k, &b.method)));

    csv_file(
        &dir.join("density.csv"),
        density_rows.iter().map(|(tag, k, m, d)| DensityCsv {
            dataset: tag,
            k: *k,
            method: m,
            n_pairs: d.n_pairs,
            mean_sim: d.mean_sim,
            sem_pairs: d.sem_pairs,
            sem_clusters: d.sem_clusters,
            n_singleton_skipped: d.n_singleton_skipped,
        }),
    )?;
    csv_file(&dir.join("metrics.csv"), &metric_rows)?;

    let gold: GoldilocksReport = read_json(&out.join(&manifest.global["goldilocks"].artifacts["goldilocks.json"].path))?;
    csv_file(
        &dir.join("goldilocks.csv"),
        (0..gold.k_values.len()).map(|i| GoldilocksCsv {
            k: gold.k_values[i],
            z_ami: gold.z_ami[i].value,
            z_acc: gold.z_acc[i].value,
            z_ami_flagged: gold.z_ami[i].flagged,
            z_acc_flagged: gold.z_acc[i].flagged,
            rank_ami: gold.rank_ami[i],
            rank_acc: gold.rank_acc[i],
            crossing: gold.is_crossing(gold.k_values[i]),
        }),
    )?;
    csv_file(
        &dir.join("zone.csv"),
        [ZoneCsv {
            k_lo: gold.zone.map(|z| z.0),
            k_hi: gold.zone.map(|z| z.1),
            max_gap: gold.max_gap,
            n_crossings: gold.crossings.len(),
            crossings: gold.crossings.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
        }],
    )?;

    let reg: RegressionArtifact =
        read_json(&out.join(&manifest.global["regression"].artifacts["regression.json"].path))?;
    csv_file(&dir.join("regression.csv"), reg.fit.iter().flat_map(|f| f.table()))?;
    csv_file(
        &dir.join("cosine_bins.csv"),
        reg.bins.bins.iter().map(|b| BinCsv {
            bin_lo: b.lo,
            bin_center: b.center(),
            proportion_correct: b.proportion.map_or_else(|| "NA".into(), |p| p.to_string()),
            n_in_bin: b.n,
            n_correct: b.n_correct,
        }),
    )?;
    csv_file(
        &dir.join("cosine_diffs.csv"),
        diff_rows.iter().map(|(tag, k, r)| DiffCsv {
            dataset: tag,
            k: *k,
            doc_id: &r.doc_id,
            cos_correct: r.cos_correct,
            cos_best_incorrect: r.cos_best_incorrect,
            cos_difference: r.cos_difference,
            correct: r.correct,
        }),
    )?;

    let summary = summary_text(&manifest, &metric_rows, &gold, &reg);
    fs::write(dir.join("summary.txt"), summary).map_err(|e| Error::io(dir.join("summary.txt"), e))?;

    let files: Vec<PathBuf> = BUNDLE_FILES.iter().map(|f| dir.join(f)).collect();
    let mut artifacts = Artifacts::new();
    for f in BUNDLE_FILES {
        artifacts.insert(
            f.to_string(),
            Artifact {
                path: format!("report/{f}"),
                checksum: file_checksum(&dir.join(f))?,
            },
        );
    }
    manifest.global.insert(
        StageName::Report.as_str().into(),
        StageRecord {
            complete: true,
            fingerprint: String::new(),
            artifacts,
            wall_ms: started.elapsed().as_millis() as u64,
        },
    );
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&manifest_path(out), text.as_bytes())?;
    Ok(ReportBundle {
        dir,
        files,
        zone: gold.zone,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn summary_text(
    manifest: &RunManifest,
    rows: &[MetricRow],
    gold: &GoldilocksReport,
    reg: &RegressionArtifact,
) -> String {
    use std::fmt::Write as _;
    let cfg = &manifest.config;
    let mut s = String::new();
    let _ = writeln!(s, "kzone sweep report");
    let _ = writeln!(s, "datasets: {}", manifest.datasets.join(", "));
    let _ = writeln!(s, "K range: {}..={}", cfg.k_min, cfg.k_max);
    let _ = writeln!(s, "master seed: {}", cfg.master_seed);
    let _ = writeln!(s, "models: {} GMM + {} random", rows.iter().filter(|r| r.method == "gmm").count(), rows.iter().filter(|r| r.method == "random").count());
    let _ = writeln!(s, "metric rows: {}", rows.len());
    let errors: usize = rows.iter().map(|r| r.n_provider_errors).sum();
    let unmatched: usize = rows.iter().map(|r| r.n_unmatched).sum();
    let _ = writeln!(s, "provider errors excluded: {errors}; unmatched responses: {unmatched}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16} {:>4}  {:>8} {:>8} {:>8} {:>8}", "dataset", "K", "method", "AMI", "acc", "density");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>4}  {:>8} {:>8} {:>8} {:>8.4}",
            r.dataset,
            r.k,
            r.method,
            fmt_opt(r.ami),
            fmt_opt(r.accuracy),
            r.density_mean
        );
    }
    let _ = writeln!(s);
    let crossings: Vec<String> = gold.crossings.iter().map(|k| k.to_string()).collect();
    let _ = writeln!(s, "rank crossings: {}", if crossings.is_empty() { "none".into() } else { crossings.join(", ") });
    match gold.zone {
        Some((lo, hi)) => {
            let _ = writeln!(s, "goldilocks zone: [{lo}, {hi}] (max gap {})", gold.max_gap);
        }
        None => {
            let _ = writeln!(s, "goldilocks zone: none");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "logistic regression ({} rows, reference dataset {})", reg.n_rows, reg.reference_dataset);
    match (&reg.fit, &reg.not_estimable) {
        (Some(fit), _) => {
            if !fit.converged {
                let _ = writeln!(s, "warning: not converged (possible separation)");
            }
            let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>8} {:>8}", "variable", "coef", "std_err", "z", "p");
            for t in fit.table() {
                let _ = writeln!(s, "{:<24} {:>10.4} {:>10.4} {:>8.3} {:>8.4}", t.variable, t.coef, t.std_err, t.z, t.p);
            }
        }
        (None, reason) => {
            let _ = writeln!(s, "not estimable: {}", reason.as_deref().unwrap_or("unknown"));
        }
    }
    s
}
