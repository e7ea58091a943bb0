use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use gmem_core::clock::{reference_epoch, ManualClock};
use gmem_core::engine::Engine;
use gmem_core::eval::fixture::FixtureCompleter;
use gmem_core::providers::{PromptKind, ScriptedCompleter};
use gmem_server::http::{serve, AppState, REQUEST_ID_HEADER};
use gmem_server::oplog::OpLog;
use serde_json::{json, Value};

struct Server {
    base: String,
    engine: Arc<Engine>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Synthetic queries the provider would write for the routing test's variables.
fn routing_script() -> ScriptedCompleter {
    ScriptedCompleter::builder()
        .when_contains(
            PromptKind::HypeQueries,
            "Refund policy",
            json!({"queries": ["customer asking for a refund on their order", "how do I process a refund request", "refund window for a purchase"]}),
        )
        .when_contains(
            PromptKind::HypeQueries,
            "Support tone",
            json!({"queries": ["reply to a customer complaint", "what tone should a support reply use", "customer is upset about an order"]}),
        )
        .build()
}

fn engine(data_dir: Option<&Path>) -> Arc<Engine> {
    let mut b = Engine::builder()
        .clock(Arc::new(ManualClock::new(reference_epoch())))
        .completer(Arc::new(FixtureCompleter::with_script(routing_script())));
    if let Some(d) = data_dir {
        b = b.data_dir(d);
    }
    Arc::new(b.build().unwrap())
}

fn start(engine: Arc<Engine>, tokens: BTreeMap<String, String>, oplog: OpLog) -> Server {
    let state = AppState::new(engine.clone(), tokens, oplog, json!({"provider": {"apiKey": "***"}}));
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            serve(listener, state, async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Server {
        base: format!("http://{addr}"),
        engine,
        shutdown: Some(stop_tx),
        thread: Some(thread),
    }
}

fn open_server() -> Server {
    start(engine(None), BTreeMap::new(), OpLog::disabled())
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn call(s: &Server, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
    let url = format!("{}{}", s.base, path);
    let a = agent();
    let auth = token.map(|t| format!("Bearer {t}"));
    let resp = match (method, body) {
        ("GET", _) => {
            let mut r = a.get(&url);
            if let Some(h) = &auth {
                r = r.header("Authorization", h);
            }
            r.call()
        }
        ("DELETE", _) => {
            let mut r = a.delete(&url);
            if let Some(h) = &auth {
                r = r.header("Authorization", h);
            }
            r.call()
        }
        (m, body) => {
            let mut r = if m == "PUT" { a.put(&url) } else { a.post(&url) };
            if let Some(h) = &auth {
                r = r.header("Authorization", h);
            }
            r.send_json(body.unwrap_or(json!({})))
        }
    }
    .unwrap();
    let status = resp.status().as_u16();
    let text = resp.into_body().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

fn memorize(s: &Server, org: &str, record: &str, lines: &[&str]) -> Value {
    let content = format!("# notes\n{}\n", lines.join("\n"));
    let (st, body) = call(
        s,
        "POST",
        "/v1/memorize",
        Some(org),
        Some(json!({"content": content, "crmKeys": {"recordId": record}, "options": {"mode": "document"}})),
    );
    assert_eq!(st, 200, "{body}");
    body
}

#[test]
fn missing_or_unknown_token_is_rejected() {
    let s = open_server();
    let (st, body) = call(&s, "GET", "/v1/health", None, None);
    assert_eq!(st, 401);
    assert_eq!(body["error"]["kind"], "unauthorized");
    let (st, _) = call(&s, "POST", "/v1/retrieve", None, Some(json!({"query": "x"})));
    assert_eq!(st, 401);

    let tokens = BTreeMap::from([("tok-acme".to_string(), "acme".to_string())]);
    let s = start(engine(None), tokens, OpLog::disabled());
    assert_eq!(call(&s, "GET", "/v1/health", Some("acme"), None).0, 401);
    assert_eq!(call(&s, "GET", "/v1/health", Some("tok-acme"), None).0, 200);
}

#[test]
fn health_echoes_config() {
    let s = open_server();
    let (st, h) = call(&s, "GET", "/v1/health", Some("acme"), None);
    assert_eq!(st, 200);
    assert_eq!(h["status"], "ok");
    assert_eq!(h["config"]["writeDedupThreshold"], 0.92);
    assert_eq!(h["config"]["consolidationMergeThreshold"], 0.95);
    assert_eq!(h["server"]["provider"]["apiKey"], "***");
}

#[test]
fn malformed_body_is_bad_request() {
    let s = open_server();
    let url = format!("{}/v1/retrieve", s.base);
    let resp = agent()
        .post(&url)
        .header("Authorization", "Bearer acme")
        .header("Content-Type", "application/json")
        .send("{not json")
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let (st, body) = call(&s, "POST", "/v1/govern", Some("acme"), Some(json!({"mode": "fast"})));
    assert_eq!(st, 400, "{body}");
    assert_eq!(body["error"]["kind"], "bad_request");
}

#[test]
fn memorize_then_retrieve_scoped_to_org() {
    let s = open_server();
    let report = memorize(&s, "acme", "deal-1", &["Acme renewed the support contract in March.", "Priya Shah is the buyer at Acme."]);
    assert_eq!(report["orgId"], "acme");
    assert_eq!(report["storedFacts"], 2);

    let (st, r) = call(&s, "POST", "/v1/retrieve", Some("acme"), Some(json!({"query": "who is the buyer", "k": 5})));
    assert_eq!(st, 200);
    assert_eq!(r["results"].as_array().unwrap().len(), 2);

    let (st, r) = call(&s, "POST", "/v1/retrieve", Some("globex"), Some(json!({"query": "who is the buyer", "k": 5})));
    assert_eq!(st, 200);
    assert!(r["results"].as_array().unwrap().is_empty());

    // A body naming another org is still scoped to the caller.
    let (_, r) = call(&s, "POST", "/v1/retrieve", Some("globex"), Some(json!({"orgId": "acme", "query": "buyer", "k": 5})));
    assert!(r["results"].as_array().unwrap().is_empty());

    let (st, ctx) = call(&s, "POST", "/v1/context/entity", Some("acme"), Some(json!({"crmKeys": {"recordId": "deal-1"}, "tokenBudget": 500})));
    assert_eq!(st, 200, "{ctx}");
    assert_eq!(ctx["includedMemoryIds"].as_array().unwrap().len(), 2);
    assert_eq!(call(&s, "POST", "/v1/context/entity", Some("globex"), Some(json!({"crmKeys": {"recordId": "deal-1"}}))).0, 404);
}

fn variable(id: &str, name: &str, tags: &[&str], content: &str) -> Value {
    json!({"id": id, "name": name, "description": format!("{name} rules"), "tags": tags, "content": content})
}

#[test]
fn variables_crud_and_cross_org_isolation() {
    let s = open_server();
    let (st, v) = call(&s, "POST", "/v1/variables", Some("acme"), Some(variable("tone", "Brand tone", &["brand"], "Write warmly.")));
    assert_eq!(st, 200, "{v}");
    assert_eq!(v["version"], 1);
    assert_eq!(v["orgId"], "acme");

    let mut update = variable("tone", "Brand tone", &["brand"], "Write warmly and briefly.");
    update["expectedVersion"] = json!(1);
    let (st, v) = call(&s, "PUT", "/v1/variables/tone", Some("acme"), Some(update.clone()));
    assert_eq!(st, 200, "{v}");
    assert_eq!(v["version"], 2);
    let (st, e) = call(&s, "PUT", "/v1/variables/tone", Some("acme"), Some(update));
    assert_eq!(st, 409, "{e}");

    assert_eq!(call(&s, "GET", "/v1/variables/tone", Some("globex"), None).0, 404);
    assert_eq!(call(&s, "DELETE", "/v1/variables/tone", Some("globex"), None).0, 404);
    let (_, list) = call(&s, "GET", "/v1/variables", Some("globex"), None);
    assert_eq!(list, json!([]));

    assert_eq!(call(&s, "DELETE", "/v1/variables/tone", Some("acme"), None).0, 200);
    assert_eq!(call(&s, "GET", "/v1/variables/tone", Some("acme"), None).0, 404);
}

#[test]
fn govern_session_withholds_delivered_variables() {
    let s = open_server();
    for v in [
        variable("refunds", "Refund policy", &["support", "refund"], "Refunds within 30 days of purchase.\nRefund requests need an order number."),
        variable("tone", "Support tone", &["support", "tone"], "Apologize once, then solve the refund problem."),
    ] {
        assert_eq!(call(&s, "POST", "/v1/variables", Some("acme"), Some(v)).0, 200);
    }
    let task = "Reply to a customer asking for a refund on their order";
    let (st, first) = call(&s, "POST", "/v1/govern", Some("acme"), Some(json!({"task": task, "mode": "fast", "newSession": true})));
    assert_eq!(st, 200, "{first}");
    let sid = first["sessionId"].as_str().unwrap().to_string();
    let delivered: Vec<&str> = first["routed"]["critical"].as_array().unwrap().iter().map(|c| c["variableId"].as_str().unwrap()).collect();
    assert!(!delivered.is_empty(), "{first}");

    let (st, second) = call(&s, "POST", "/v1/govern", Some("acme"), Some(json!({"task": task, "mode": "fast", "sessionId": sid})));
    assert_eq!(st, 200);
    for c in second["routed"]["critical"].as_array().unwrap() {
        assert!(!delivered.contains(&c["variableId"].as_str().unwrap()), "{second}");
    }
    assert!(second["routed"]["tokenCount"].as_u64().unwrap() < first["routed"]["tokenCount"].as_u64().unwrap());

    // Another org cannot continue the session.
    let (st, _) = call(&s, "POST", "/v1/govern", Some("globex"), Some(json!({"task": task, "mode": "fast", "sessionId": sid})));
    assert_eq!(st, 404);
    assert_eq!(call(&s, "DELETE", &format!("/v1/govern/session/{sid}"), Some("acme"), None).0, 200);
    assert_eq!(s.engine.sessions().len(), 0);
}

#[test]
fn restart_reproduces_rankings() {
    let dir = tempfile::tempdir().unwrap();
    let query = json!({"query": "renewal timing and budget", "k": 10});
    let before = {
        let s = start(engine(Some(dir.path())), BTreeMap::new(), OpLog::disabled());
        memorize(&s, "acme", "deal-1", &["Acme renews every March.", "Budget approval sits with the CFO.", "Acme runs twelve clinics."]);
        memorize(&s, "acme", "deal-2", &["Globex prefers quarterly billing.", "The renewal call is booked for Friday."]);
        call(&s, "POST", "/v1/retrieve", Some("acme"), Some(query.clone())).1
    };
    let s = start(engine(Some(dir.path())), BTreeMap::new(), OpLog::disabled());
    let after = call(&s, "POST", "/v1/retrieve", Some("acme"), Some(query)).1;
    assert_eq!(before["results"].as_array().unwrap().len(), 5);
    assert_eq!(before["results"], after["results"]);
}

#[test]
fn mutations_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("ops.jsonl");
    let tokens = BTreeMap::from([("secret-token".to_string(), "acme".to_string())]);
    let s = start(engine(None), tokens, OpLog::open(&log_path).unwrap());
    let url = format!("{}/v1/consolidate", s.base);
    let resp = agent()
        .post(&url)
        .header("Authorization", "Bearer secret-token")
        .send_json(json!({"dryRun": true}))
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let rid = resp.headers().get(REQUEST_ID_HEADER).unwrap().to_str().unwrap().to_string();
    call(&s, "GET", "/v1/variables", Some("secret-token"), None);
    call(&s, "POST", "/v1/memorize", None, Some(json!({"content": "x"})));
    drop(s);

    let text = std::fs::read_to_string(&log_path).unwrap();
    assert!(!text.contains("secret-token"));
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2, "GET requests are not logged: {text}");
    assert_eq!(lines[0]["requestId"], rid);
    assert_eq!(lines[0]["orgId"], "acme");
    assert_eq!(lines[0]["op"], "POST /v1/consolidate");
    assert_eq!(lines[0]["status"], 200);
    assert_eq!(lines[0]["meta"]["dryRun"], true);
    assert_eq!(lines[1]["status"], 401);
    assert_eq!(lines[1]["orgId"], Value::Null);
}
