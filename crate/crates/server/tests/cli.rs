use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn gmem(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gmem"));
    c.current_dir(dir);
    for (k, _) in std::env::vars() {
        if k.starts_with("GMEM_") {
            c.env_remove(k);
        }
    }
    c
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON error in {text}"));
    serde_json::from_str(line).unwrap()
}

#[test]
fn eval_run_prints_table_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmem(dir.path()).args(["eval", "run", "e6", "--report", "r.json"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("dedup_rate") && table.contains("overall: PASS"), "{table}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "e6");
    assert_eq!(report["pass"], true);
}

#[test]
fn unknown_experiment_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmem(dir.path()).args(["eval", "run", "e99"]).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["error"]["kind"], "eval_error");
}

#[test]
fn missing_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmem(dir.path())
        .args(["--config", "absent.toml", "retrieve", "--org", "acme", "--query", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["error"]["kind"], "config_not_found");
}

#[test]
fn memorize_requires_a_provider() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("notes.txt"), "Acme renews in March.\n").unwrap();
    let out = gmem(dir.path()).args(["memorize", "--org", "acme", "--file", "notes.txt"]).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["error"]["kind"], "provider_unconfigured");
}

#[test]
fn scripted_memorize_persists_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let script = json!([
        {"kind": "dualExtract", "contains": "Brightwater", "response": {
            "facts": [{"text": "Brightwater Dental renews its contract every March."},
                      {"text": "Dana Whitfield approves purchases at Brightwater Dental."}],
            "properties": []}}
    ]);
    std::fs::write(dir.path().join("script.json"), script.to_string()).unwrap();
    std::fs::write(
        dir.path().join("gmem.toml"),
        "dataDir = \"data\"\n[provider]\nscript = \"script.json\"\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("call.txt"), "Call notes: Brightwater Dental, renewal and approvals.\n").unwrap();

    let out = gmem(dir.path())
        .args(["memorize", "--org", "acme", "--file", "call.txt", "--record-id", "deal-7"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["storedFacts"], 2);

    let out = gmem(dir.path())
        .args(["retrieve", "--org", "acme", "--query", "who approves purchases", "--k", "1", "--record-id", "deal-7"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["results"][0]["entry"]["text"], "Dana Whitfield approves purchases at Brightwater Dental.");

    let out = gmem(dir.path()).args(["retrieve", "--org", "globex", "--query", "who approves purchases"]).output().unwrap();
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["results"], json!([]));
}

#[test]
fn serve_on_an_ephemeral_port() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = gmem(dir.path())
        .args(["serve", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let health = agent.get(format!("{base}/v1/health")).header("Authorization", "Bearer acme").call();
    let anon = agent.get(format!("{base}/v1/health")).call();
    child.kill().unwrap();
    child.wait().unwrap();
    let mut health = health.unwrap();
    assert_eq!(health.status().as_u16(), 200);
    let body: Value = health.body_mut().read_json().unwrap();
    assert_eq!(body["config"]["writeDedupThreshold"], 0.92);
    assert_eq!(anon.unwrap().status().as_u16(), 401);
}
