use std::sync::Arc;
use std::time::Duration;

use forgeloop::policy::{PolicyMode, PolicySpec};
use forgeloop::transcript;
use forgeloop::{CompletionBackend, ScriptedModel, SessionConfig};
use forgeloop_console::{
    bind, check_bind, summarize, transcript_path, BindError, Console, ConsoleSettings, SessionSummary,
};
use futures::StreamExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    console: Console,
    root: tempfile::TempDir,
    _task: tokio::task::JoinHandle<()>,
}

fn scripted(responses: Vec<String>) -> forgeloop_console::BackendFactory {
    Arc::new(move |_id: &str| -> Result<Box<dyn CompletionBackend>, String> {
        Ok(Box::new(ScriptedModel::from_responses(responses.clone())))
    })
}

async fn start_with(responses: Vec<&str>, mode: PolicyMode, tweak: impl FnOnce(&mut ConsoleSettings)) -> Server {
    let root = tempfile::tempdir().unwrap();
    let policy = PolicySpec {
        mode,
        ..PolicySpec::default()
    }
    .compile()
    .unwrap();
    let config = SessionConfig {
        policy,
        ..SessionConfig::default()
    };
    let mut settings = ConsoleSettings::new(
        root.path(),
        config,
        scripted(responses.into_iter().map(String::from).collect()),
    );
    tweak(&mut settings);
    let console = Console::new(settings);
    let listener = bind("127.0.0.1:0".parse().unwrap(), false, None).await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let serving = console.clone();
    let task = tokio::spawn(async move {
        serving.serve(listener, std::future::pending()).await.unwrap();
    });
    Server {
        base,
        console,
        root,
        _task: task,
    }
}

async fn start(responses: Vec<&str>, mode: PolicyMode) -> Server {
    start_with(responses, mode, |_| {}).await
}

impl Server {
    fn ws_url(&self, id: &str, from: u64) -> String {
        format!("{}/sessions/{id}/events?from={from}", self.base.replacen("http", "ws", 1))
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = reqwest::Client::new()
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        let text = r.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = reqwest::get(format!("{}{path}", self.base)).await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn create(&self) -> String {
        let (status, body) = self.post("/sessions", json!({})).await;
        assert_eq!(status, 201, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }

    async fn summary(&self, id: &str) -> SessionSummary {
        let (status, body) = self.get(&format!("/sessions/{id}")).await;
        assert_eq!(status, 200);
        serde_json::from_value(body).unwrap()
    }

    async fn wait_for(&self, id: &str, pred: impl Fn(&SessionSummary) -> bool) -> SessionSummary {
        for _ in 0..500 {
            let s = self.summary(id).await;
            if pred(&s) {
                return s;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("condition not reached: {:?}", self.summary(id).await);
    }
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(url: &str) -> Ws {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

/// Next transcript record from the stream, or `None` when it closes.
async fn next_record(ws: &mut Ws) -> Option<Value> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("stream stalled")?;
        match msg.ok()? {
            Message::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
            Message::Close(_) => return None,
            _ => {}
        }
    }
}

async fn until_kind(ws: &mut Ws, kind: &str) -> Value {
    loop {
        let r = next_record(ws).await.unwrap_or_else(|| panic!("stream closed before {kind}"));
        if r["kind"] == kind {
            return r;
        }
    }
}

const DONE: &str = "All done.";

#[tokio::test]
async fn health_and_session_creation() {
    let s = start(vec![DONE], PolicyMode::AutoRun).await;
    assert_eq!(s.get("/health").await, (200, json!({"status": "ok"})));

    let (status, body) = s.post("/sessions", json!({})).await;
    assert_eq!(status, 201);
    assert_eq!(body["status"], "awaiting_task");
    let b = s.create().await;
    assert_ne!(body["session_id"].as_str().unwrap(), b);

    assert_eq!(s.post("/sessions", json!({"max_steps": 0})).await.0, 400);
    assert_eq!(s.post("/sessions", json!({"bogus": 1})).await.0, 400);
    let (status, body) = s.post("/sessions", json!({"max_steps": 4})).await;
    assert_eq!((status, body["max_steps"].as_u64()), (201, Some(4)));

    let (_, list) = s.get("/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 3);
    assert_eq!(s.get("/sessions/nope").await.0, 404);
}

#[tokio::test]
async fn input_routes_to_task_and_resume() {
    let s = start(vec!["```bash\necho hi\n```", DONE, DONE], PolicyMode::AutoRun).await;
    let id = s.create().await;
    assert_eq!(s.post("/sessions/nope/input", json!({"text": "x"})).await.0, 404);
    assert_eq!(s.post(&format!("/sessions/{id}/input"), json!({"text": "  "})).await.0, 422);

    let mut ws = connect(&s.ws_url(&id, 0)).await;
    let (status, _) = s.post(&format!("/sessions/{id}/input"), json!({"text": "say hi"})).await;
    assert_eq!(status, 202);
    let submitted = until_kind(&mut ws, "task_submitted").await;
    assert_eq!(submitted["payload"]["task"], "say hi");
    until_kind(&mut ws, "paused").await;

    let summary = s.wait_for(&id, |x| x.status == "awaiting_human").await;
    assert_eq!(summary.step_index, 2);

    let (status, _) = s.post(&format!("/sessions/{id}/input"), json!({"text": "again"})).await;
    assert_eq!(status, 202);
    let resumed = until_kind(&mut ws, "resumed").await;
    assert_eq!(resumed["payload"]["input"], "again");
}

#[tokio::test]
async fn input_while_stepping_conflicts() {
    let s = start(vec!["```bash\nsleep 1\n```", DONE], PolicyMode::AutoRun).await;
    let id = s.create().await;
    assert_eq!(s.post(&format!("/sessions/{id}/input"), json!({"text": "wait"})).await.0, 202);
    let (status, body) = s.post(&format!("/sessions/{id}/input"), json!({"text": "more"})).await;
    assert_eq!(status, 409, "{body}");
    s.wait_for(&id, |x| x.status == "awaiting_human").await;
}

#[tokio::test]
async fn approval_round_trip() {
    let s = start(vec!["```bash\necho approved\necho second\n```", DONE], PolicyMode::ApproveAll).await;
    let id = s.create().await;
    let mut ws = connect(&s.ws_url(&id, 0)).await;
    s.post(&format!("/sessions/{id}/input"), json!({"text": "go"})).await;

    let req = until_kind(&mut ws, "approval_requested").await;
    let exec_id = req["payload"]["request"]["exec_id"].as_str().unwrap().to_string();
    let pending = s.wait_for(&id, |x| x.pending_approval.is_some()).await;
    assert_eq!(pending.pending_approval.unwrap().command, "echo approved");
    assert_eq!(pending.pause_reason, Some(forgeloop::session::PauseReason::ApprovalPending));
    assert_eq!(s.post(&format!("/sessions/{id}/input"), json!({"text": "x"})).await.0, 409);

    assert_eq!(s.post(&format!("/sessions/{id}/approvals/9-9"), json!({"decision": "approve"})).await.0, 404);
    assert_eq!(s.post(&format!("/sessions/{id}/approvals/{exec_id}"), json!({"decision": "maybe"})).await.0, 400);

    let sent = std::time::Instant::now();
    let (status, _) = s.post(&format!("/sessions/{id}/approvals/{exec_id}"), json!({"decision": "approve"})).await;
    assert_eq!(status, 204);
    let resolved = until_kind(&mut ws, "approval_resolved").await;
    assert_eq!(resolved["payload"]["decision"], "approve");
    let started = until_kind(&mut ws, "command_started").await;
    assert_eq!(started["payload"]["command"], "echo approved");
    assert!(sent.elapsed() < Duration::from_secs(1));
    let (status, _) = s.post(&format!("/sessions/{id}/approvals/{exec_id}"), json!({"decision": "deny"})).await;
    assert_eq!(status, 409);

    let finished = until_kind(&mut ws, "command_finished").await;
    assert_eq!(finished["payload"]["record"]["request"]["command"], "echo approved");
    assert_eq!(finished["payload"]["record"]["stdout"], "approved\n");

    // Second command: deny, and the loop carries on.
    let req = until_kind(&mut ws, "approval_requested").await;
    let second = req["payload"]["request"]["exec_id"].as_str().unwrap().to_string();
    assert_eq!(s.post(&format!("/sessions/{id}/approvals/{second}"), json!({"decision": "deny"})).await.0, 204);
    let finished = until_kind(&mut ws, "command_finished").await;
    assert_eq!(finished["payload"]["record"]["verdict"], "denied");
    assert_eq!(finished["payload"]["record"]["rule"], "operator");
    until_kind(&mut ws, "step_completed").await;
    let done = s.wait_for(&id, |x| x.status == "awaiting_human").await;
    assert_eq!(done.step_index, 2);
    assert!(done.pending_approval.is_none());
}

#[tokio::test]
async fn approval_times_out() {
    let s = start_with(vec!["```bash\necho never\n```", DONE], PolicyMode::ApproveAll, |c| {
        c.approval_timeout = Duration::from_millis(200)
    })
    .await;
    let id = s.create().await;
    let mut ws = connect(&s.ws_url(&id, 0)).await;
    s.post(&format!("/sessions/{id}/input"), json!({"text": "go"})).await;
    let resolved = until_kind(&mut ws, "approval_resolved").await;
    assert_eq!(resolved["payload"]["decision"], "timed_out");
    let finished = until_kind(&mut ws, "command_finished").await;
    assert_eq!(finished["payload"]["record"]["verdict"], "needs_approval_timed_out");
}

#[tokio::test]
async fn stream_backlog_reconnect_and_unknown() {
    let s = start(vec!["```bash\necho one\n```", DONE], PolicyMode::AutoRun).await;
    let id = s.create().await;
    s.post(&format!("/sessions/{id}/input"), json!({"text": "go"})).await;
    let summary = s.wait_for(&id, |x| x.status == "awaiting_human").await;
    let total = summary.event_count;
    assert!(total >= 5);

    let mut ws = connect(&s.ws_url(&id, 0)).await;
    for seq in 0..total {
        assert_eq!(next_record(&mut ws).await.unwrap()["seq"], seq);
    }
    let mut ws = connect(&s.ws_url(&id, 3)).await;
    assert_eq!(next_record(&mut ws).await.unwrap()["seq"], 3);

    // The live tail continues after the backlog.
    let (status, _) = s.post(&format!("/sessions/{id}/close"), json!({})).await;
    assert_eq!(status, 200);
    let mut last = 3;
    while let Some(r) = next_record(&mut ws).await {
        last = r["seq"].as_u64().unwrap();
        if r["kind"] == "session_closed" {
            break;
        }
    }
    assert_eq!(last, total);
    assert!(next_record(&mut ws).await.is_none(), "closed after session_closed");
    assert_eq!(s.post(&format!("/sessions/{id}/close"), json!({})).await.0, 409);

    let mut ws = connect(&s.ws_url("missing", 0)).await;
    let frame = next_record(&mut ws).await.unwrap();
    assert_eq!(frame["error"], "unknown session");
    assert!(next_record(&mut ws).await.is_none());
}

#[tokio::test]
async fn records_match_transcript_file_and_summary_is_derived() {
    let s = start(vec!["```bash\necho a\n```", DONE], PolicyMode::AutoRun).await;
    let id = s.create().await;
    s.post(&format!("/sessions/{id}/input"), json!({"text": "go"})).await;
    let summary = s.wait_for(&id, |x| x.status == "awaiting_human").await;

    let loaded = transcript::load(&transcript_path(s.root.path(), &id)).unwrap();
    assert_eq!(summarize(&loaded.events), summary);

    let mut ws = connect(&s.ws_url(&id, 0)).await;
    for record in &loaded.events {
        let streamed = next_record(&mut ws).await.unwrap();
        assert_eq!(streamed, serde_json::from_str::<Value>(&record.to_json_line()).unwrap());
    }
    // Prefix summaries only depend on the prefix.
    for n in 0..=loaded.events.len() {
        let a = summarize(&loaded.events[..n]);
        assert_eq!(a.event_count, n as u64);
    }
}

/// Randomly timed disconnects while a long session runs; the union of what
/// the client saw must be the contiguous transcript.
#[tokio::test]
async fn reconnecting_client_sees_every_event_once() {
    let mut responses: Vec<String> = (0..12).map(|i| format!("```bash\necho step{i}\n```")).collect();
    responses.push(DONE.into());
    let s = start(responses.iter().map(String::as_str).collect(), PolicyMode::AutoRun).await;
    let id = s.create().await;
    s.post(&format!("/sessions/{id}/input"), json!({"text": "go"})).await;

    let mut seen: Vec<u64> = Vec::new();
    let mut rng_state: u64 = 0x9e3779b97f4a7c15;
    let mut next_rand = move || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        rng_state
    };
    let mut closed = false;
    let mut reconnects = 0;
    while !closed {
        let from = seen.last().map_or(0, |s| s + 1);
        let mut ws = connect(&s.ws_url(&id, from)).await;
        let take = 1 + next_rand() % 7;
        for _ in 0..take {
            match next_record(&mut ws).await {
                Some(r) => {
                    seen.push(r["seq"].as_u64().unwrap());
                    if r["kind"] == "paused" && !closed {
                        s.post(&format!("/sessions/{id}/close"), json!({})).await;
                    }
                    if r["kind"] == "session_closed" {
                        closed = true;
                        break;
                    }
                }
                None => break,
            }
        }
        drop(ws);
        reconnects += 1;
    }
    assert!(reconnects > 3);
    let expected: Vec<u64> = (0..seen.len() as u64).collect();
    assert_eq!(seen, expected);
    assert_eq!(seen.len(), transcript::load(&transcript_path(s.root.path(), &id)).unwrap().events.len());
}

#[tokio::test]
async fn auth_token_and_bind_rules() {
    let s = start_with(vec![DONE], PolicyMode::AutoRun, |c| c.auth_token = Some("s3cret".into())).await;
    assert_eq!(s.get("/health").await.0, 401);
    let r = reqwest::Client::new()
        .get(format!("{}/health", s.base))
        .bearer_auth("s3cret")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);

    let remote = "0.0.0.0:0".parse().unwrap();
    assert!(matches!(check_bind(remote, false, Some("t")), Err(BindError::NonLoopbackRefused(_))));
    assert!(matches!(check_bind(remote, true, None), Err(BindError::TokenRequired(_))));
    assert!(check_bind(remote, true, Some("t")).is_ok());
    assert!(check_bind("[::1]:0".parse().unwrap(), false, None).is_ok());

    let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = taken.local_addr().unwrap();
    assert!(matches!(bind(addr, false, None).await, Err(BindError::InUse(_))));
}

#[tokio::test]
async fn shutdown_interrupts_and_existing_sessions_reload() {
    let s = start(vec!["```bash\nsleep 0.3\n```", "```bash\necho more\n```", DONE], PolicyMode::AutoRun).await;
    let id = s.create().await;
    s.post(&format!("/sessions/{id}/input"), json!({"text": "go"})).await;
    s.wait_for(&id, |x| x.event_count > 3).await;
    let console = s.console.clone();
    tokio::task::spawn_blocking(move || console.shutdown()).await.unwrap();

    let loaded = transcript::load(&transcript_path(s.root.path(), &id)).unwrap();
    let summary = summarize(&loaded.events);
    assert_eq!(summary.status, "awaiting_human");
    assert_eq!(summary.pause_reason, Some(forgeloop::session::PauseReason::Interrupted));

    let again = Console::new(ConsoleSettings::new(s.root.path(), SessionConfig::default(), scripted(vec![DONE.into()])));
    let (ids, failed) = again.load_existing();
    assert_eq!(ids, vec![id.clone()]);
    assert!(failed.is_empty());
    assert_eq!(again.summaries()[0], summary);
}
