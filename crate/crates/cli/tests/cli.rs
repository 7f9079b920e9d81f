use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use tempfile::TempDir;

fn kctutor() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kctutor"));
    c.env_remove("KCTUTOR_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    kctutor().args(args).output().expect("spawn kctutor")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic data set.
fn synth(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    let o = run(&["synth", "--out", s(&d), "--students", "30", "--records", "30", "--branching", "3,4", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    d
}

#[test]
fn full_pipeline_writes_outputs_and_manifests() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path());
    for f in ["tree.jsonl", "params.json", "histories.jsonl", "questions.jsonl", "corpus.jsonl", "templates.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let fit = tmp.path().join("fit");
    let o = run(&[
        "fit", "--tree", s(&d.join("tree.jsonl")), "--histories", s(&d.join("histories.jsonl")),
        "--out", s(&fit), "--max-iters", "1000", "--tolerance", "1e-3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fit.join("trace.json")).unwrap()).unwrap();
    let ll: Vec<f64> = trace["log_likelihood"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9), "log-likelihood decreased");

    let v = tmp.path().join("verifier");
    let o = run(&[
        "verifier", "train", "--tree", s(&d.join("tree.jsonl")), "--corpus", s(&d.join("corpus.jsonl")),
        "--out", s(&v), "--epochs", "10",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(v.join("model.json").exists() && v.join("loss_trace.json").exists());

    let sim = tmp.path().join("sim");
    let o = run(&[
        "simulate", "--tree", s(&d.join("tree.jsonl")), "--params", s(&fit.join("params.json")),
        "--histories", s(&d.join("histories.jsonl")), "--bank", s(&d.join("questions.jsonl")),
        "--policy", "initial,oracle,generator", "--rounds", "3", "--exam-size", "12", "--cut-points", "10,20",
        "--generator", "template", "--templates", s(&d.join("templates.json")),
        "--verifier", s(&v.join("model.json")), "--out", s(&sim),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sim.join("report.json")).unwrap()).unwrap();
    let agg = report["aggregate"].as_object().unwrap();
    let mut names: Vec<&str> = agg.keys().map(String::as_str).collect();
    names.sort_unstable();
    assert_eq!(names, ["generator", "initial", "oracle"]);
    assert_eq!(agg["oracle"]["count"], 60);
    let csv = std::fs::read_to_string(sim.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 60);
    let exam: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sim.join("exam.json")).unwrap()).unwrap();
    assert_eq!(exam["entries"].as_array().unwrap().len(), 12);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sim.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seeds"]["seed"], 0);
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));
    assert!(inputs.contains_key(s(&d.join("templates.json"))));

    let rank = tmp.path().join("rank");
    let o = run(&[
        "analyze-rank", "--tree", s(&d.join("tree.jsonl")), "--params", s(&fit.join("params.json")),
        "--histories", s(&d.join("histories.jsonl")), "--cut-points", "10,20", "--out", s(&rank),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(rank.join("rank_report.jsonl")).unwrap();
    let initial: Vec<f64> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["initial_mastery"].as_f64().unwrap())
        .collect();
    assert_eq!(initial.len(), 60);
    assert!(initial.windows(2).all(|w| w[0] <= w[1]), "rank report is not sorted");

    // The question text of a bank item should map back to its concept.
    let bank = std::fs::read_to_string(d.join("questions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(bank.lines().next().unwrap()).unwrap();
    let o = run(&[
        "verifier", "identify", "--tree", s(&d.join("tree.jsonl")), "--model", s(&v.join("model.json")),
        "--question", first["text"].as_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), first["kc"].as_str().unwrap());

    let o = run(&[
        "verifier", "score", "--tree", s(&d.join("tree.jsonl")), "--model", s(&v.join("model.json")),
        "--question", first["text"].as_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let rows: Vec<serde_json::Value> =
        String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["score"].as_f64().unwrap())));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path());
    let again = tmp.path().join("again");
    let o = run(&["synth", "--out", s(&again), "--students", "30", "--records", "30", "--branching", "3,4", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    for f in ["tree.jsonl", "params.json", "histories.jsonl", "questions.jsonl", "corpus.jsonl"] {
        assert_eq!(std::fs::read(d.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f} differs");
    }

    let sim = |out: &Path, jobs: &str| {
        let o = run(&[
            "--jobs", jobs, "simulate", "--tree", s(&d.join("tree.jsonl")), "--params", s(&d.join("params.json")),
            "--histories", s(&d.join("histories.jsonl")), "--bank", s(&d.join("questions.jsonl")),
            "--policy", "random,oracle", "--rounds", "2", "--exam-size", "10", "--seed", "3", "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("report.json")).unwrap()
    };
    assert_eq!(sim(&tmp.path().join("a"), "1"), sim(&tmp.path().join("b"), "4"));
}

#[test]
fn exit_codes_follow_failure_class() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path());
    let out = tmp.path().join("out");

    let o = run(&["fit", "--tree", s(&tmp.path().join("absent.jsonl")), "--histories", s(&d.join("histories.jsonl")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));

    let o = run(&["fit", "--tree", s(&d.join("tree.jsonl"))]);
    assert_eq!(code(&o), 1, "missing required flag");

    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"a\", \"parent\": \"ghost\"}\n").unwrap();
    let o = run(&["fit", "--tree", s(&bad), "--histories", s(&d.join("histories.jsonl")), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["fit", "--tree", s(&d.join("tree.jsonl")), "--histories", s(&d.join("histories.jsonl")), "--out", s(&out), "--max-iters", "2"]);
    assert_eq!(code(&o), 4);
    assert!(out.join("params.json").exists(), "params are still written when not converged");

    let o = run(&[
        "simulate", "--tree", s(&d.join("tree.jsonl")), "--params", s(&d.join("params.json")),
        "--histories", s(&d.join("histories.jsonl")), "--bank", s(&d.join("questions.jsonl")),
        "--policy", "generator", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 1, "generator policy without a generator");

    let o = run(&["--jobs", "0", "synth", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn flags_override_config_file_which_overrides_env() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"students": 4, "records": 5, "branching": [2, 2]}"#).unwrap();

    // Histories are one record per line; returns (students, records of the first).
    let shape = |dir: &Path| {
        let text = std::fs::read_to_string(dir.join("histories.jsonl")).unwrap();
        let ids: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["student_id"].as_str().unwrap().to_string())
            .collect();
        let mut distinct = ids.clone();
        distinct.dedup();
        (distinct.len(), ids.iter().filter(|i| **i == ids[0]).count())
    };

    // File beats env.
    let a = tmp.path().join("a");
    let o = kctutor()
        .args(["--config", s(&cfg), "synth", "--out", s(&a)])
        .env("KCTUTOR_STUDENTS", "9")
        .env("KCTUTOR_CORPUS_PER_KC", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(shape(&a), (4, 5));
    // Env applies where the file is silent.
    assert_eq!(std::fs::read_to_string(a.join("corpus.jsonl")).unwrap().lines().count(), 2 * 4);

    // Flag beats file; config path can come from the environment.
    let b = tmp.path().join("b");
    let o = kctutor()
        .args(["synth", "--out", s(&b), "--students", "6"])
        .env("KCTUTOR_CONFIG", s(&cfg))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(shape(&b), (6, 5));

    let broken = tmp.path().join("broken.json");
    std::fs::write(&broken, "[1, 2]").unwrap();
    let o = run(&["--config", s(&broken), "synth", "--out", s(&b)]);
    assert_eq!(code(&o), 1);
}

fn http(port: u16, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let body = body.unwrap_or("");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    let status = resp[9..12].parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_answers_requests_and_reports_busy_port() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path());
    let port = free_port();
    let mut child = kctutor()
        .args(["serve", "--tree", s(&d.join("tree.jsonl")), "--params", s(&d.join("params.json"))])
        .args(["--port", &port.to_string(), "--tree-id", "demo", "--params-id", "fitted"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with(&format!("listening on http://127.0.0.1:{port}")), "{line}");

    let (status, body) = http(port, "GET", "/healthz", None);
    assert_eq!(status, 200, "{body}");
    let (status, body) = http(port, "POST", "/sessions", Some(r#"{"tree": "demo", "params": "fitted"}"#));
    assert_eq!(status, 201, "{body}");
    let created: serde_json::Value = serde_json::from_str(&body).unwrap();
    let id = created["session_id"].as_str().unwrap();
    let (status, body) = http(port, "GET", &format!("/sessions/{id}/recommendation"), None);
    assert_eq!(status, 200, "{body}");
    let rec: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert!(rec["education_value"].as_f64().unwrap() >= rec["baseline"].as_f64().unwrap() - 1e-9);

    let busy = run(&[
        "serve", "--tree", s(&d.join("tree.jsonl")), "--params", s(&d.join("params.json")), "--port", &port.to_string(),
    ]);
    assert_eq!(code(&busy), 3, "{}", String::from_utf8_lossy(&busy.stderr));

    child.kill().unwrap();
    child.wait().unwrap();
}
