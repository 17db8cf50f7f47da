use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn fx(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str]) -> Out {
    let index = dir.join("index.bin").display().to_string();
    let db = dir.join("contracts.db").display().to_string();
    let mut full = vec!["clauseqa", "--index", &index, "--db", &db];
    full.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = clauseqa::run(full, &mut out, &mut err);
    Out {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ingest_fixtures(dir: &Path) -> Out {
    run(
        dir,
        &[
            "ingest",
            "--docs",
            &fx("corpus"),
            "--manifest",
            &fx("corpus/manifest.jsonl"),
            "--contracts",
            &fx("contracts.csv"),
        ],
    )
}

fn stub_args() -> Vec<String> {
    vec!["--provider".into(), "stub".into(), "--stub-script".into(), fx("stub_script.toml")]
}

fn ask(dir: &Path, question: &str, extra: &[&str]) -> Out {
    let stub = stub_args();
    let mut args = vec!["ask", question];
    args.extend(stub.iter().map(String::as_str));
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn ingest_prints_counts_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let first = ingest_fixtures(dir.path());
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert_eq!(first.stdout.trim(), "3 documents, 9 chunks, 3 contract rows");
    let second = ingest_fixtures(dir.path());
    assert_eq!(second.stdout, first.stdout);
    assert!(dir.path().join("index.bin").exists());
}

#[test]
fn ingest_usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = run(dir.path(), &["ingest", "--docs", &fx("corpus"), "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(missing.code, 2);
    assert!(missing.stderr.contains("manifest.jsonl"), "{}", missing.stderr);
    assert_eq!(run(dir.path(), &["ingest", "--docs", &fx("corpus")]).code, 2);
    assert_eq!(run(dir.path(), &["ingest"]).code, 2);
    assert_eq!(run(dir.path(), &["frobnicate"]).code, 2);
    assert!(!dir.path().join("index.bin").exists());
}

#[test]
fn ask_prints_answer_and_citations() {
    let dir = TempDir::new().unwrap();
    ingest_fixtures(dir.path());
    let out = ask(dir.path(), "Who is the contract manager of contract 123/2024?", &[]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(out.stdout.starts_with("The contract manager is Alice Souza."));
    assert!(out.stdout.contains("[c123.txt | 123/2024 | 2. CONTRACT MANAGER] c123.txt#0002"));
}

#[test]
fn ask_json_is_an_envelope() {
    let dir = TempDir::new().unwrap();
    ingest_fixtures(dir.path());
    let out = ask(dir.path(), "How many active contracts do we have?", &["--json"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let env: Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(env["route"]["target"], "sql");
    assert_eq!(env["table"]["rows"], serde_json::json!([[2]]));
    assert!(env["executed_sql"].as_str().unwrap().contains("status = 'active'"));
}

#[test]
fn ask_history_persists_through_sessions_file() {
    let dir = TempDir::new().unwrap();
    ingest_fixtures(dir.path());
    let file = dir.path().join("sessions.json").display().to_string();
    let q = "Who is the contract manager of contract 123/2024?";
    assert_eq!(ask(dir.path(), q, &["--sessions", &file, "--session", "op"]).code, 0);
    assert_eq!(ask(dir.path(), q, &["--sessions", &file, "--session", "op"]).code, 0);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(saved["op"].as_array().unwrap().len(), 2);
}

#[test]
fn ask_provider_down_exits_3() {
    let dir = TempDir::new().unwrap();
    ingest_fixtures(dir.path());
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let out = run(
        dir.path(),
        &["ask", "Who is the contract manager of contract 123/2024?", "--provider", "remote", "--llm-url", &url, "--llm-model", "m"],
    );
    assert_eq!(out.code, 3, "{}", out.stderr);
    assert!(out.stderr.contains("unavailable"), "{}", out.stderr);
}

#[test]
fn ask_configuration_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["ask", "hi", "--provider", "stub"]).code, 2);
    assert_eq!(run(dir.path(), &["ask", "hi", "--provider", "remote"]).code, 2);
    let stub = stub_args();
    let mut args = vec!["ask", "   "];
    args.extend(stub.iter().map(String::as_str));
    assert_eq!(run(dir.path(), &args).code, 2);
    ingest_fixtures(dir.path());
    let out = ask(dir.path(), "hi", &["--embedding-dims", "64"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("--embedding-dims"), "{}", out.stderr);
}

#[test]
fn eval_report_is_deterministic() {
    let dir = TempDir::new().unwrap();
    ingest_fixtures(dir.path());
    let stub = stub_args();
    let questions = fx("eval/questions.json");
    let mut reports = Vec::new();
    for i in 0..3 {
        let report = dir.path().join(format!("report-{i}.json")).display().to_string();
        let mut args = vec!["eval", "--questions", &questions[..], "--report", &report[..]];
        args.extend(stub.iter().map(String::as_str));
        let out = run(dir.path(), &args);
        assert_eq!(out.code, 0, "{}", out.stderr);
        assert!(out.stdout.contains("route match 100.0%"), "{}", out.stdout);
        reports.push(std::fs::read_to_string(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[1], reports[2]);
}

#[test]
fn eval_empty_suite_exits_2() {
    let dir = TempDir::new().unwrap();
    let questions = dir.path().join("q.json");
    std::fs::write(&questions, "[]").unwrap();
    let report = dir.path().join("r.json").display().to_string();
    let stub = stub_args();
    let q = questions.display().to_string();
    let mut args = vec!["eval", "--questions", &q[..], "--report", &report[..]];
    args.extend(stub.iter().map(String::as_str));
    let out = run(dir.path(), &args);
    assert_eq!(out.code, 2);
    assert!(!Path::new(&report).exists());
}

fn http_get(port: u16, path: &str) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).ok()?;
    let status = resp.split_whitespace().nth(1)?.parse().ok()?;
    let body = resp.split_once("\r\n\r\n")?.1.to_string();
    Some((status, body))
}

fn serve_cmd(dir: &Path, port: u16, extra: &[String]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clauseqa"));
    cmd.arg("--index")
        .arg(dir.join("index.bin"))
        .arg("--db")
        .arg(dir.join("contracts.db"))
        .args(["serve", "--port", &port.to_string()])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    cmd
}

#[test]
fn serve_exposes_health() {
    let dir = TempDir::new().unwrap();
    ingest_fixtures(dir.path());
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = serve_cmd(dir.path(), port, &stub_args()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with("listening on"), "{line}");

    let deadline = Instant::now() + Duration::from_secs(10);
    let health = loop {
        if let Some(r) = http_get(port, "/health") {
            break r;
        }
        assert!(Instant::now() < deadline, "server never answered");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health.0, 200);
    let body = health.1;
    let json_start = body.find('{').unwrap();
    let v: Value = serde_json::from_str(body[json_start..].trim_end_matches(|c: char| c != '}')).unwrap();
    assert_eq!(v["chunks"], 9);
    assert_eq!(v["contracts"], 3);
    assert_eq!(v["provider_mode"], "stub");
}

#[test]
fn serve_port_conflict_exits_2() {
    let dir = TempDir::new().unwrap();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let out = serve_cmd(dir.path(), port, &stub_args()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));
}

#[test]
fn serve_stub_requires_script() {
    let dir = TempDir::new().unwrap();
    let out = serve_cmd(dir.path(), 0, &["--provider".into(), "stub".into()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stub-script"));
}
