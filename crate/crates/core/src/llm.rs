//! Cluster naming and name-based re-classification through a provider.
//!
//! A [`Provider`] answers two verbs, `name-cluster` and `classify-bio`.
//! [`HttpProvider`] speaks JSON over HTTP to a live model with bounded retry,
//! a cap on in-flight requests and an append-only audit log.
//! [`MockProvider`] answers offline and deterministically.
//!
//! Classification responses are archived verbatim before they are scored;
//! scoring is a pure function of the archived response, the names and the
//! Levenshtein threshold.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{cosine, Corpus, EmbeddingStore};
use crate::error::{Error, Result};
use crate::regression::cosine_features;
use crate::seed::{rng_from, substream};

pub const DEFAULT_THRESHOLD: usize = 4;

/// Builds the classification prompt. Names appear comma-separated in cluster order.
pub fn build_classification_prompt(bio: &str, names: &[String]) -> Result<String> {
    if names.len() < 2 {
        return Err(Error::Config(
            "classification needs at least two cluster names".into(),
        ));
    }
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate cluster name `{name}`")));
        }
    }
    let list = names.join(", ");
    Ok(format!(
        "You have a large set of bios from Twitter,\n\
         \n\
         - You have a large set of bios from Twitter.\n\
         - You have clustered them into the following groups: {list}\n\
         - The following bio belongs to only one of these groups.\n\
         - Your task is to determine which group the bio belongs to.\n\
         - You may only choose one group and should respond with only the name of the selected group.\n\
         - Here is the bio: {bio}."
    ))
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Unit-cost edit distance over Unicode scalar values, case-sensitive.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOutcome {
    /// Closest name (lowest index on ties), `None` when even that is at or
    /// beyond the threshold.
    pub matched: Option<usize>,
    pub correct: bool,
    pub distance_to_true: usize,
}

/// Scores one response. Surrounding whitespace is ignored.
pub fn match_response(
    response: &str,
    names: &[String],
    true_cluster: usize,
    threshold: usize,
) -> MatchOutcome {
    let response = response.trim();
    let distances: Vec<usize> = names.iter().map(|n| levenshtein(response, n)).collect();
    let distance_to_true = distances
        .get(true_cluster)
        .copied()
        .unwrap_or(usize::MAX);
    let mut best: Option<(usize, usize)> = None;
    for (i, &d) in distances.iter().enumerate() {
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let matched = best.and_then(|(i, d)| (d < threshold).then_some(i));
    MatchOutcome {
        matched,
        correct: distance_to_true < threshold,
        distance_to_true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedClustering {
    pub k: usize,
    pub names: Vec<String>,
    /// Document ids shown to the namer, per cluster.
    pub sample_ids_used: Vec<Vec<String>>,
    pub provider_id: String,
    /// Optional stochastic naming table `q(w|m)`, K rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_table: Option<Vec<Vec<f64>>>,
}

impl NamedClustering {
    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.k {
            return Err(Error::Validation(format!(
                "{} names for K={}",
                self.names.len(),
                self.k
            )));
        }
        if let Some(n) = self.names.iter().find(|n| n.trim().is_empty()) {
            return Err(Error::Validation(format!("empty cluster name `{n}`")));
        }
        if let Some(table) = &self.encoder_table {
            if table.len() != self.k
                || table
                    .iter()
                    .any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&p| p < 0.0))
            {
                return Err(Error::Validation("encoder table rows must be distributions".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// wire format

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub bio: String,
    pub names: Vec<String>,
    pub run_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub choice: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRequest {
    pub samples: Vec<String>,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameResponse {
    pub name: String,
}

/// Local side information available to offline providers. Never sent on the wire.
#[derive(Debug, Clone, Copy)]
pub struct ClassifyContext<'a> {
    pub true_cluster: usize,
    pub bio_embedding: &'a [f32],
    pub name_embeddings: &'a [Vec<f64>],
}

pub trait Provider: Send + Sync {
    fn id(&self) -> String;

    /// Deterministic providers get logical (zero) timestamps in archives.
    fn is_deterministic(&self) -> bool {
        false
    }

    fn name_cluster(&self, request: &NameRequest) -> Result<NameResponse>;

    fn classify(
        &self,
        request: &ClassifyRequest,
        context: &ClassifyContext<'_>,
    ) -> Result<ClassifyResponse>;
}

// ---------------------------------------------------------------------------
// offline provider

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum MockClassifier {
    /// Answers with the name whose embedding is most cosine-similar to the bio.
    #[default]
    NearestName,
    /// Answers with the true cluster name.
    Echo,
    /// Always answers the given string.
    Fixed(String),
}

#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    pub classifier: MockClassifier,
}

impl MockProvider {
    pub fn new(classifier: MockClassifier) -> Self {
        MockProvider { classifier }
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        match &self.classifier {
            MockClassifier::NearestName => "mock:nearest-name".into(),
            MockClassifier::Echo => "mock:echo".into(),
            MockClassifier::Fixed(s) => format!("mock:fixed:{s}"),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name_cluster(&self, request: &NameRequest) -> Result<NameResponse> {
        let texts: Vec<&str> = request.samples.iter().map(String::as_str).collect();
        let name = keyword_name(&texts).unwrap_or_else(|| "unnamed".into());
        Ok(NameResponse { name })
    }

    fn classify(
        &self,
        request: &ClassifyRequest,
        context: &ClassifyContext<'_>,
    ) -> Result<ClassifyResponse> {
        let choice = match &self.classifier {
            MockClassifier::Echo => request
                .names
                .get(context.true_cluster)
                .cloned()
                .ok_or_else(|| Error::Provider("true cluster out of range".into()))?,
            MockClassifier::Fixed(s) => s.clone(),
            MockClassifier::NearestName => {
                let mut best = (0usize, f64::NEG_INFINITY);
                for (j, emb) in context.name_embeddings.iter().enumerate() {
                    let c = cosine(context.bio_embedding, emb)?;
                    if c > best.1 {
                        best = (j, c);
                    }
                }
                request.names[best.0].clone()
            }
        };
        Ok(ClassifyResponse { choice })
    }
}

// ---------------------------------------------------------------------------
// live provider

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after every failure.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (attempt - 2).min(20)))
    }
}

#[derive(Debug, Serialize)]
struct AuditEntry<'a> {
    run_id: &'a str,
    verb: &'a str,
    attempt: u32,
    request: &'a serde_json::Value,
    response: Option<&'a serde_json::Value>,
    error: Option<&'a str>,
    timestamp_ms: u128,
}

/// Append-only JSON-lines log with a single writer.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(AuditLog {
            path,
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    fn append(&self, entry: &AuditEntry<'_>) -> Result<()> {
        let line = serde_json::to_string(entry).expect("audit entries serialize");
        let mut out = self.out.lock().expect("audit lock");
        writeln!(out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.max {
            active = self.freed.wait(active).expect("in-flight lock");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// JSON-over-HTTP provider: `POST {endpoint}/name-cluster` and `POST {endpoint}/classify-bio`.
pub struct HttpProvider {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    in_flight: InFlight,
    audit: Option<AuditLog>,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(true)
            .build()
            .into();
        HttpProvider {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            retry,
            in_flight: InFlight {
                active: Mutex::new(0),
                freed: Condvar::new(),
                max: max_in_flight.max(1),
            },
            audit: None,
        }
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    fn call<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        verb: &str,
        run_id: &str,
        request: &Req,
    ) -> Result<Resp> {
        let url = format!("{}/{verb}", self.endpoint);
        let body = serde_json::to_value(request).expect("requests serialize");
        let mut last_error = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            std::thread::sleep(self.retry.delay_before(attempt));
            let outcome = {
                let _slot = self.in_flight.acquire();
                self.agent
                    .post(&url)
                    .send_json(&body)
                    .and_then(|mut r| r.body_mut().read_json::<serde_json::Value>())
            };
            let (response, error) = match &outcome {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            if let Some(audit) = &self.audit {
                audit.append(&AuditEntry {
                    run_id,
                    verb,
                    attempt,
                    request: &body,
                    response,
                    error: error.as_deref(),
                    timestamp_ms: now_ms(),
                })?;
            }
            match outcome {
                Ok(v) => match serde_json::from_value::<Resp>(v) {
                    Ok(parsed) => return Ok(parsed),
                    Err(e) => last_error = format!("malformed {verb} response: {e}"),
                },
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(Error::Provider(format!(
            "{verb} failed after {} attempts: {last_error}",
            self.retry.max_attempts.max(1)
        )))
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn name_cluster(&self, request: &NameRequest) -> Result<NameResponse> {
        self.call("name-cluster", &request.run_id, request)
    }

    fn classify(
        &self,
        request: &ClassifyRequest,
        _context: &ClassifyContext<'_>,
    ) -> Result<ClassifyResponse> {
        self.call("classify-bio", &request.run_id, request)
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// naming

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "been", "but",
    "by", "can", "co", "do", "for", "from", "get", "had", "has", "have", "he", "her", "here",
    "him", "his", "how", "http", "https", "i", "if", "in", "into", "is", "it", "its", "just",
    "me", "more", "my", "no", "not", "now", "of", "on", "one", "or", "our", "out", "rt", "she",
    "so", "some", "than", "that", "the", "their", "them", "there", "they", "this", "to", "too",
    "up", "us", "was", "we", "were", "what", "when", "which", "who", "will", "with", "you",
    "your",
];

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
}

/// Top three non-stopword tokens by document frequency (ties alphabetical).
pub fn keyword_name(texts: &[&str]) -> Option<String> {
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        let unique: HashSet<String> = tokenize(text).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if ranked.is_empty() {
        return None;
    }
    Some(
        ranked
            .into_iter()
            .take(3)
            .map(|(t, _)| t)
            .collect::<Vec<_>>()
            .join(" "),
    )
}

/// Makes names unique: a name already taken gets ` (k)` appended.
fn disambiguate(names: &mut [String]) {
    let mut taken: HashSet<String> = HashSet::new();
    for (k, name) in names.iter_mut().enumerate() {
        if !taken.contains(name.as_str()) {
            taken.insert(name.clone());
            continue;
        }
        let mut candidate = format!("{name} ({k})");
        let mut bump = 1;
        while taken.contains(&candidate) {
            candidate = format!("{name} ({k}.{bump})");
            bump += 1;
        }
        taken.insert(candidate.clone());
        *name = candidate;
    }
}

fn members_of(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

/// Seeded sample of up to `per_cluster` member indices for each cluster, ascending.
pub fn naming_samples(labels: &[usize], k: usize, per_cluster: usize, seed: u64) -> Vec<Vec<usize>> {
    members_of(labels, k)
        .into_iter()
        .enumerate()
        .map(|(c, m)| {
            let mut rng = substream(seed, c as u64);
            let take = per_cluster.min(m.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, m.len(), take)
                .into_iter()
                .map(|i| m[i])
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

fn check_labels(corpus: &Corpus, labels: &[usize], k: usize) -> Result<()> {
    if labels.len() != corpus.len() {
        return Err(Error::Alignment(format!(
            "{} labels for {} documents",
            labels.len(),
            corpus.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {l} out of range for K={k}")));
    }
    Ok(())
}

/// Offline namer: keyword names from all of a cluster's texts.
///
/// Empty clusters are named `empty-<k>`, clusters without usable tokens
/// `cluster-<k>`. `sample_ids_used` records the seeded sample a live namer
/// would have been shown.
pub fn mock_name_clusters(
    corpus: &Corpus,
    labels: &[usize],
    k: usize,
    seed: u64,
    samples_per_cluster: usize,
) -> Result<NamedClustering> {
    check_labels(corpus, labels, k)?;
    let members = members_of(labels, k);
    let mut names: Vec<String> = members
        .iter()
        .enumerate()
        .map(|(c, m)| {
            if m.is_empty() {
                return format!("empty-{c}");
            }
            let texts: Vec<&str> = m.iter().map(|&i| corpus.docs()[i].text.as_str()).collect();
            keyword_name(&texts).unwrap_or_else(|| format!("cluster-{c}"))
        })
        .collect();
    disambiguate(&mut names);
    let sample_ids_used = naming_samples(labels, k, samples_per_cluster, seed)
        .into_iter()
        .map(|s| s.into_iter().map(|i| corpus.docs()[i].id.clone()).collect())
        .collect();
    Ok(NamedClustering {
        k,
        names,
        sample_ids_used,
        provider_id: "mock:keywords".into(),
        encoder_table: None,
    })
}

/// Names every cluster through `provider` from a seeded sample of its texts.
pub fn provider_name_clusters(
    provider: &dyn Provider,
    corpus: &Corpus,
    labels: &[usize],
    k: usize,
    seed: u64,
    samples_per_cluster: usize,
    run_id: &str,
) -> Result<NamedClustering> {
    check_labels(corpus, labels, k)?;
    let samples = naming_samples(labels, k, samples_per_cluster, seed);
    let mut names = Vec::with_capacity(k);
    for (c, sample) in samples.iter().enumerate() {
        if sample.is_empty() {
            names.push(format!("empty-{c}"));
            continue;
        }
        let request = NameRequest {
            samples: sample.iter().map(|&i| corpus.docs()[i].text.clone()).collect(),
            run_id: run_id.to_string(),
        };
        let name = provider.name_cluster(&request)?.name.trim().to_string();
        names.push(if name.is_empty() { format!("cluster-{c}") } else { name });
    }
    disambiguate(&mut names);
    Ok(NamedClustering {
        k,
        names,
        sample_ids_used: samples
            .into_iter()
            .map(|s| s.into_iter().map(|i| corpus.docs()[i].id.clone()).collect())
            .collect(),
        provider_id: provider.id(),
        encoder_table: None,
    })
}

/// Stand-in name embeddings: the mean embedding of each cluster's members.
/// Empty clusters fall back to the corpus mean.
pub fn centroid_name_embeddings(store: &EmbeddingStore, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = store.dim();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    let mut global = vec![0.0; d];
    for (i, &l) in labels.iter().enumerate() {
        for (j, &v) in store.row(i).iter().enumerate() {
            sums[l][j] += f64::from(v);
            global[j] += f64::from(v);
        }
        counts[l] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| {
            if c == 0 {
                global.clone()
            } else {
                s.into_iter().map(|v| v / c as f64).collect()
            }
        })
        .collect()
}

/// Name embeddings from the corpus itself: each token maps to the mean
/// embedding of the documents containing it and a name to the mean of its
/// known tokens. Names without a known token fall back to their cluster centroid.
pub fn token_mean_name_embeddings(
    corpus: &Corpus,
    store: &EmbeddingStore,
    labels: &[usize],
    names: &[String],
) -> Result<Vec<Vec<f64>>> {
    check_labels(corpus, labels, names.len())?;
    let d = store.dim();
    let name_tokens: Vec<Vec<String>> = names.iter().map(|n| tokenize(n).collect()).collect();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for t in name_tokens.iter().flatten() {
        sums.entry(t.as_str()).or_insert_with(|| (vec![0.0; d], 0));
    }
    for (i, doc) in corpus.docs().iter().enumerate() {
        let tokens: HashSet<String> = tokenize(&doc.text).collect();
        for t in &tokens {
            if let Some((sum, count)) = sums.get_mut(t.as_str()) {
                for (s, &v) in sum.iter_mut().zip(store.row(i)) {
                    *s += f64::from(v);
                }
                *count += 1;
            }
        }
    }
    let centroids = centroid_name_embeddings(store, labels, names.len());
    Ok(name_tokens
        .iter()
        .zip(centroids)
        .map(|(tokens, centroid)| {
            let mut acc = vec![0.0; d];
            let mut used = 0usize;
            for t in tokens {
                let (sum, count) = &sums[t.as_str()];
                if *count > 0 {
                    for (a, s) in acc.iter_mut().zip(sum) {
                        *a += s / *count as f64;
                    }
                    used += 1;
                }
            }
            if used == 0 {
                centroid
            } else {
                acc.into_iter().map(|v| v / used as f64).collect()
            }
        })
        .collect())
}

/// Name embeddings looked up by name text in a separately encoded store.
pub fn store_name_embeddings(name_store: &EmbeddingStore, names: &[String]) -> Result<Vec<Vec<f64>>> {
    names
        .iter()
        .map(|n| {
            name_store
                .row_of(n)
                .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                .ok_or_else(|| Error::Alignment(format!("no embedding for cluster name `{n}`")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordStatus {
    Ok,
    ProviderError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub doc_id: String,
    pub prompt_hash: String,
    pub response_text: String,
    pub timestamp: u128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

mod matched_label {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Label(usize),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(l) => Wire::Label(*l).serialize(s),
            None => Wire::Tag("UNMATCHED".into()).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Wire::deserialize(d)? {
            Wire::Label(l) => Ok(Some(l)),
            Wire::Tag(t) if t == "UNMATCHED" => Ok(None),
            Wire::Tag(t) => Err(serde::de::Error::custom(format!("unknown label `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub doc_id: String,
    pub true_cluster: usize,
    pub true_name: String,
    pub response_text: String,
    /// `None` is serialized as `"UNMATCHED"`.
    #[serde(with = "matched_label")]
    pub matched_label: Option<usize>,
    pub correct: bool,
    pub levenshtein_to_true: usize,
    pub cos_correct: f64,
    pub cos_best_incorrect: f64,
    pub cos_difference: f64,
    pub status: RecordStatus,
}

impl ClassificationRecord {
    pub fn is_provider_error(&self) -> bool {
        self.status == RecordStatus::ProviderError
    }

    #[cfg(test)]
    pub(crate) fn scored_for_test(correct: bool) -> Self {
        ClassificationRecord {
            doc_id: String::new(),
            true_cluster: 0,
            true_name: String::new(),
            response_text: String::new(),
            matched_label: correct.then_some(0),
            correct,
            levenshtein_to_true: if correct { 0 } else { 9 },
            cos_correct: 0.0,
            cos_best_incorrect: 0.0,
            cos_difference: 0.0,
            status: RecordStatus::Ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub sample_size: usize,
    pub threshold: usize,
    pub seed: u64,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationRun {
    pub raw: Vec<RawResponse>,
    pub records: Vec<ClassificationRecord>,
}

impl ClassificationRun {
    pub fn n_provider_errors(&self) -> usize {
        self.records.iter().filter(|r| r.is_provider_error()).count()
    }

    pub fn n_unmatched(&self) -> usize {
        self.records
            .iter()
            .filter(|r| !r.is_provider_error() && r.matched_label.is_none())
            .count()
    }
}

pub fn sample_indices(n: usize, sample_size: usize, seed: u64) -> Result<Vec<usize>> {
    if sample_size == 0 || sample_size > n {
        return Err(Error::Config(format!(
            "classification sample size {sample_size} must be in 1..={n}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut picked = index::sample(&mut rng, n, sample_size).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Scores one archived response against the clustering it was asked about.
pub fn score_response(
    raw: &RawResponse,
    true_cluster: usize,
    names: &[String],
    threshold: usize,
    features: (f64, f64, f64),
) -> ClassificationRecord {
    let (cos_correct, cos_best_incorrect, cos_difference) = features;
    let true_name = names[true_cluster].clone();
    if raw.error.is_some() {
        return ClassificationRecord {
            doc_id: raw.doc_id.clone(),
            true_cluster,
            true_name,
            response_text: raw.response_text.clone(),
            matched_label: None,
            correct: false,
            levenshtein_to_true: levenshtein(raw.response_text.trim(), &names[true_cluster]),
            cos_correct,
            cos_best_incorrect,
            cos_difference,
            status: RecordStatus::ProviderError,
        };
    }
    let m = match_response(&raw.response_text, names, true_cluster, threshold);
    ClassificationRecord {
        doc_id: raw.doc_id.clone(),
        true_cluster,
        true_name,
        response_text: raw.response_text.clone(),
        matched_label: m.matched,
        correct: m.correct,
        levenshtein_to_true: m.distance_to_true,
        cos_correct,
        cos_best_incorrect,
        cos_difference,
        status: RecordStatus::Ok,
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("rows serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Samples bios, asks the provider to classify each by name, archives the
/// raw responses (to `archive` when given) and scores them.
///
/// `store` rows and `labels` must follow `corpus` order.
#[allow(clippy::too_many_arguments)]
pub fn classify_sample(
    provider: &dyn Provider,
    corpus: &Corpus,
    store: &EmbeddingStore,
    labels: &[usize],
    named: &NamedClustering,
    name_embeddings: &[Vec<f64>],
    cfg: &ClassifyConfig,
    archive: Option<&Path>,
) -> Result<ClassificationRun> {
    named.validate()?;
    check_labels(corpus, labels, named.k)?;
    if store.len() != corpus.len() {
        return Err(Error::Alignment("store and corpus sizes differ".into()));
    }
    if name_embeddings.len() != named.k {
        return Err(Error::Alignment(format!(
            "{} name embeddings for K={}",
            name_embeddings.len(),
            named.k
        )));
    }
    let picked = sample_indices(corpus.len(), cfg.sample_size, cfg.seed)?;
    let deterministic = provider.is_deterministic();
    let raw: Vec<RawResponse> = picked
        .par_iter()
        .map(|&i| -> Result<RawResponse> {
            let doc = &corpus.docs()[i];
            let prompt = build_classification_prompt(&doc.text, &named.names)?;
            let request = ClassifyRequest {
                bio: doc.text.clone(),
                names: named.names.clone(),
                run_id: cfg.run_id.clone(),
                prompt: prompt.clone(),
            };
            let context = ClassifyContext {
                true_cluster: labels[i],
                bio_embedding: store.row(i),
                name_embeddings,
            };
            let outcome = provider.classify(&request, &context);
            let timestamp = if deterministic { 0 } else { now_ms() };
            let (response_text, error) = match outcome {
                Ok(r) => (r.choice, None),
                Err(e) => (String::new(), Some(e.to_string())),
            };
            Ok(RawResponse {
                doc_id: doc.id.clone(),
                prompt_hash: prompt_hash(&prompt),
                response_text,
                timestamp,
                error,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(path) = archive {
        write_jsonl(path, &raw)?;
    }
    let records = raw
        .iter()
        .zip(&picked)
        .map(|(r, &i)| {
            let features = cosine_features(store.row(i), name_embeddings, labels[i])?;
            Ok(score_response(r, labels[i], &named.names, cfg.threshold, features))
        })
        .collect::<Result<_>>()?;
    Ok(ClassificationRun { raw, records })
}
