use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use kzone::llm::{
    build_classification_prompt, AuditLog, ClassifyContext, ClassifyRequest, HttpProvider, NameRequest, Provider,
    RetryPolicy,
};
use kzone::pipeline::{run, DatasetSpec, ProviderConfig, ProviderKind, RunConfig, StageName};
use kzone::synthetic::{blob_corpus, BlobSpec};
use serde_json::{json, Value};

/// What the mock server does with one request.
type Handler = dyn Fn(usize, &str, &Value) -> (u16, String) + Send + Sync;

struct MockServer {
    endpoint: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
    peak_in_flight: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).ok()?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    Some((path, serde_json::from_slice(&body).unwrap_or(Value::Null)))
}

fn serve(handler: Arc<Handler>, delay: Duration) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let peak = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let (req_log, peak_log) = (requests.clone(), peak.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, requests, peak, active) = (handler.clone(), req_log.clone(), peak_log.clone(), active.clone());
            thread::spawn(move || {
                let Some((path, body)) = read_request(&mut stream) else { return };
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let index = {
                    let mut log = requests.lock().unwrap();
                    log.push((path.clone(), body.clone()));
                    log.len() - 1
                };
                thread::sleep(delay);
                let (status, text) = handler(index, &path, &body);
                active.fetch_sub(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    MockServer {
        endpoint,
        requests,
        peak_in_flight: peak,
    }
}

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_delay_ms: 1,
    }
}

fn classify_request(names: &[String]) -> ClassifyRequest {
    let bio = "loves hiking and rivers".to_string();
    ClassifyRequest {
        prompt: build_classification_prompt(&bio, names).unwrap(),
        bio,
        names: names.to_vec(),
        run_id: "run-7".into(),
    }
}

fn context() -> ClassifyContext<'static> {
    ClassifyContext {
        true_cluster: 0,
        bio_embedding: &[],
        name_embeddings: &[],
    }
}

fn audit_lines(path: &std::path::Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn classify_retries_transient_failures_and_audits_every_attempt() {
    let server = serve(
        Arc::new(|i, _, _| {
            if i < 2 {
                (503, "{}".into())
            } else {
                (200, json!({"choice": "Outdoors"}).to_string())
            }
        }),
        Duration::ZERO,
    );
    let dir = tempfile::tempdir().unwrap();
    let audit_path = dir.path().join("audit.jsonl");
    let provider = HttpProvider::new(&server.endpoint, fast_retry(3), 4).with_audit(AuditLog::open(&audit_path).unwrap());
    let names = vec!["Outdoors".to_string(), "Cooking".to_string()];
    let request = classify_request(&names);
    let response = provider.classify(&request, &context()).unwrap();
    assert_eq!(response.choice, "Outdoors");

    let seen = server.requests.lock().unwrap().clone();
    assert_eq!(seen.len(), 3);
    for (path, body) in &seen {
        assert_eq!(path, "/classify-bio");
        assert_eq!(body, &serde_json::to_value(&request).unwrap());
    }
    let audit = audit_lines(&audit_path);
    let attempts: Vec<u64> = audit.iter().map(|e| e["attempt"].as_u64().unwrap()).collect();
    assert_eq!(attempts, vec![1, 2, 3]);
    assert!(audit[..2].iter().all(|e| e["response"].is_null() && e["error"].is_string()));
    assert_eq!(audit[2]["response"]["choice"], "Outdoors");
    assert!(audit.iter().all(|e| e["run_id"] == "run-7" && e["verb"] == "classify-bio"));
}

#[test]
fn exhausted_retries_surface_a_provider_error() {
    let server = serve(Arc::new(|_, _, _| (500, "{}".into())), Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let audit_path = dir.path().join("audit.jsonl");
    let provider = HttpProvider::new(&server.endpoint, fast_retry(2), 1).with_audit(AuditLog::open(&audit_path).unwrap());
    let err = provider
        .name_cluster(&NameRequest {
            samples: vec!["a bio".into()],
            run_id: "r".into(),
        })
        .unwrap_err();
    assert!(matches!(err, kzone::Error::Provider(_)), "{err:?}");
    assert_eq!(server.requests.lock().unwrap().len(), 2);
    assert_eq!(audit_lines(&audit_path).len(), 2);
}

#[test]
fn malformed_responses_are_retried_then_rejected() {
    let server = serve(Arc::new(|_, _, _| (200, json!({"label": "x"}).to_string())), Duration::ZERO);
    let provider = HttpProvider::new(&server.endpoint, fast_retry(2), 1);
    let names = vec!["A".to_string(), "B".to_string()];
    let err = provider.classify(&classify_request(&names), &context()).unwrap_err();
    assert!(err.to_string().contains("malformed"), "{err}");
    assert_eq!(server.requests.lock().unwrap().len(), 2);
}

#[test]
fn in_flight_requests_are_capped() {
    let server = serve(
        Arc::new(|_, _, _| (200, json!({"name": "n"}).to_string())),
        Duration::from_millis(40),
    );
    let provider = Arc::new(HttpProvider::new(&server.endpoint, fast_retry(1), 2));
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let provider = provider.clone();
            thread::spawn(move || {
                provider
                    .name_cluster(&NameRequest {
                        samples: vec![format!("bio {i}")],
                        run_id: "r".into(),
                    })
                    .unwrap()
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().name, "n");
    }
    assert_eq!(server.requests.lock().unwrap().len(), 8);
    assert!(server.peak_in_flight.load(Ordering::SeqCst) <= 2);
}

#[test]
fn pipeline_runs_against_a_live_endpoint() {
    // names each cluster by request order and always answers the first listed name
    let counter = Arc::new(AtomicUsize::new(0));
    let server = serve(
        Arc::new(move |_, path, body| match path {
            "/name-cluster" => (200, json!({"name": format!("group {}", counter.fetch_add(1, Ordering::SeqCst))}).to_string()),
            _ => (200, json!({"choice": body["names"][0]}).to_string()),
        }),
        Duration::ZERO,
    );
    let dir = tempfile::tempdir().unwrap();
    let blobs = blob_corpus(&BlobSpec {
        tag: "live".into(),
        n_docs: 60,
        n_blobs: 2,
        seed: 3,
        ..BlobSpec::default()
    })
    .unwrap();
    let cfg = RunConfig {
        datasets: vec![DatasetSpec {
            manifest: blobs.save(dir.path()).unwrap(),
            tag: None,
        }],
        k_min: 2,
        k_max: 3,
        sample_size: 20,
        output_dir: dir.path().join("out"),
        provider: ProviderConfig {
            kind: ProviderKind::Http,
            endpoint: Some(server.endpoint.clone()),
            retry: fast_retry(2),
            ..ProviderConfig::default()
        },
        ..RunConfig::default()
    };
    run(&cfg, StageName::Evaluate).unwrap();
    let seen = server.requests.lock().unwrap();
    let naming = seen.iter().filter(|(p, _)| p == "/name-cluster").count();
    let classify = seen.iter().filter(|(p, _)| p == "/classify-bio").count();
    // two methods per K, K in {2, 3}
    assert_eq!(naming, 2 * (2 + 3));
    assert_eq!(classify, 2 * 2 * 20);
    assert!(seen.iter().all(|(_, b)| b["run_id"] == "kzone"));
    let audit = audit_lines(&cfg.output_dir.join("audit.jsonl"));
    assert_eq!(audit.len(), seen.len());
}
