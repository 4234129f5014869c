use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kzone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kzone")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, tag: &str, seed: &str) -> String {
    let o = kzone(&[
        "synth", "--out", dir.to_str().unwrap(), "--tag", tag, "--n-docs", "120", "--blobs", "3", "--noise", "0.6",
        "--seed", seed,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).trim().to_string()
}

fn write_config(dir: &Path, manifests: &[String]) -> String {
    let datasets: String = manifests.iter().map(|m| format!("[[datasets]]\nmanifest = {m:?}\n\n")).collect();
    let text = format!("k_min = 2\nk_max = 4\nsample_size = 40\noutput_dir = \"out\"\n\n{datasets}");
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn staged_commands_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifests = vec![synth(dir.path(), "east", "1"), synth(dir.path(), "west", "2")];
    assert!(Path::new(&manifests[0]).is_file());
    let config = write_config(dir.path(), &manifests);

    let cluster = kzone(&["cluster", "--config", &config]);
    assert!(cluster.status.success(), "{}", String::from_utf8_lossy(&cluster.stderr));
    assert!(stdout(&cluster).contains("6 stages executed"), "{}", stdout(&cluster));

    let early = kzone(&["report", "--config", &config]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("incomplete stages"));

    let regress = kzone(&["regress", "--config", &config]);
    assert!(regress.status.success(), "{}", String::from_utf8_lossy(&regress.stderr));
    assert!(stdout(&regress).contains("6 reused"), "{}", stdout(&regress));
    assert!(stdout(&regress).contains("goldilocks zone"));

    let out = dir.path().join("out");
    let report = kzone(&["report", "--output-dir", out.to_str().unwrap()]);
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    assert!(out.join("report/metrics.csv").is_file());
    assert_eq!(fs::read_to_string(out.join("report/metrics.csv")).unwrap().lines().count(), 1 + 2 * 3 * 2);
}

#[test]
fn run_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let manifests = vec![synth(dir.path(), "solo", "3")];
    let config = write_config(dir.path(), &manifests);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, seed) in [(&a, "5"), (&b, "6")] {
        let o = kzone(&["run", "--config", &config, "--seed", seed, "--output-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let model = |d: &Path| fs::read(d.join("units/solo/k004/gmm.model")).unwrap();
    assert_ne!(model(&a), model(&b));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn provider_endpoint_flag_switches_to_http() {
    let dir = tempfile::tempdir().unwrap();
    let manifests = vec![synth(dir.path(), "net", "4")];
    let config = write_config(dir.path(), &manifests);
    // nothing listens on port 9 of the loopback, so naming fails after retries
    let o = kzone(&["name", "--config", &config, "--provider-endpoint", "http://127.0.0.1:9"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("provider error"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/audit.jsonl").is_file());
}

#[test]
fn init_config_emits_loadable_toml() {
    let o = kzone(&["init-config", "data/a.json"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("k_max = 50"));
    assert!(text.contains("data/a.json"));
}

#[test]
fn bad_invocations_fail_cleanly() {
    assert!(!kzone(&["cluster"]).status.success());
    let o = kzone(&["cluster", "--config", "/nonexistent/run.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
