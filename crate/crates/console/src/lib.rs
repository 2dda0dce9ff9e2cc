//! HTTP and WebSocket interface for observing and driving sessions.
//!
//! Every session runs on its own worker thread that owns the
//! [`Session`]; HTTP handlers only read the transcript and post messages to
//! the worker's mailbox. The event stream carries transcript records
//! verbatim, one JSON object per text frame.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forgeloop::executor::{ApprovalOracle, ApprovalRequest};
use forgeloop::session::{PauseReason, SessionError};
use forgeloop::transcript::{self, Event, TranscriptEvent, TRANSCRIPT_FILE};
use forgeloop::{
    ApprovalDecision, CompletionBackend, Session, SessionConfig, SessionState, SessionStatus,
    Transcript,
};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub const DEFAULT_STREAM_BUFFER: usize = 4096;
pub const DEFAULT_APPROVAL_TIMEOUT: Duration = Duration::from_secs(600);

/// Close code sent when the session does not exist.
pub const CLOSE_UNKNOWN_SESSION: u16 = 4404;
/// Close code sent when a consumer falls too far behind; reconnect with `from`.
pub const CLOSE_TOO_SLOW: u16 = 4408;
pub const CLOSE_NORMAL: u16 = 1000;

/// Builds the model backend for a new or reopened session, given its id.
pub type BackendFactory =
    Arc<dyn Fn(&str) -> Result<Box<dyn CompletionBackend>, String> + Send + Sync>;

#[derive(Clone)]
pub struct ConsoleSettings {
    pub session_root: PathBuf,
    pub base_config: SessionConfig,
    pub backend: BackendFactory,
    pub approval_timeout: Duration,
    /// Required as `Authorization: Bearer <token>` (or `?access_token=`) when set.
    pub auth_token: Option<String>,
    pub stream_buffer: usize,
}

impl ConsoleSettings {
    pub fn new(session_root: impl Into<PathBuf>, base_config: SessionConfig, backend: BackendFactory) -> Self {
        Self {
            session_root: session_root.into(),
            base_config,
            backend,
            approval_timeout: DEFAULT_APPROVAL_TIMEOUT,
            auth_token: None,
            stream_buffer: DEFAULT_STREAM_BUFFER,
        }
    }
}

#[derive(Debug)]
pub enum BindError {
    NonLoopbackRefused(SocketAddr),
    TokenRequired(SocketAddr),
    InUse(SocketAddr),
    Io(SocketAddr, std::io::Error),
}

impl std::fmt::Display for BindError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BindError::NonLoopbackRefused(a) => {
                write!(f, "refusing to bind non-loopback address {a} without --allow-remote")
            }
            BindError::TokenRequired(a) => write!(f, "binding {a} requires an auth token"),
            BindError::InUse(a) => write!(f, "address {a} is already in use"),
            BindError::Io(a, e) => write!(f, "cannot bind {a}: {e}"),
        }
    }
}

impl std::error::Error for BindError {}

/// Checks the bind address against the loopback-only default.
pub fn check_bind(addr: SocketAddr, allow_remote: bool, token: Option<&str>) -> Result<(), BindError> {
    if addr.ip().is_loopback() {
        return Ok(());
    }
    if !allow_remote {
        return Err(BindError::NonLoopbackRefused(addr));
    }
    if token.is_none_or(str::is_empty) {
        return Err(BindError::TokenRequired(addr));
    }
    Ok(())
}

pub async fn bind(addr: SocketAddr, allow_remote: bool, token: Option<&str>) -> Result<TcpListener, BindError> {
    check_bind(addr, allow_remote, token)?;
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => BindError::InUse(addr),
        _ => BindError::Io(addr, e),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingApproval {
    pub exec_id: String,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pause_reason: Option<PauseReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub task: Option<String>,
    pub step_index: u32,
    pub max_steps: u32,
    pub pending_approval: Option<PendingApproval>,
    pub created_at: Option<String>,
    pub event_count: u64,
}

/// Summary of a session as of the end of `events`.
pub fn summarize(events: &[TranscriptEvent]) -> SessionSummary {
    let mut state = SessionState::new(PathBuf::new());
    let mut pending: Option<PendingApproval> = None;
    for record in events {
        let _ = state.apply(&record.event);
        match &record.event {
            Event::ApprovalRequested { request, .. } => {
                pending = Some(PendingApproval {
                    exec_id: request.exec_id.clone(),
                    command: request.command.clone(),
                })
            }
            Event::ApprovalResolved { exec_id, .. }
                if pending.as_ref().is_some_and(|p| &p.exec_id == exec_id) =>
            {
                pending = None
            }
            _ => {}
        }
    }
    let (pause_reason, failure) = match &state.status {
        SessionStatus::AwaitingHuman { reason } => (Some(*reason), None),
        SessionStatus::Failed { cause } => (None, Some(cause.clone())),
        _ => (None, None),
    };
    SessionSummary {
        session_id: state.session_id.clone(),
        status: state.status.name().to_string(),
        pause_reason,
        failure,
        task: state.task.clone(),
        step_index: state.step_index,
        max_steps: state.max_steps,
        pending_approval: pending,
        created_at: events.first().map(|e| e.t.clone()),
        event_count: events.len() as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolveError {
    NotFound,
    AlreadyResolved,
}

#[derive(Default)]
struct BoardInner {
    waiting: HashSet<String>,
    decided: HashMap<String, ApprovalDecision>,
    finished: HashSet<String>,
    cancelled: bool,
}

/// Approval oracle fed by HTTP requests. A decision may arrive between the
/// `approval_requested` event and the executor starting to wait; it is held
/// until collected.
pub struct ApprovalBoard {
    inner: Mutex<BoardInner>,
    ready: Condvar,
    timeout: Duration,
}

impl ApprovalBoard {
    pub fn new(timeout: Duration) -> Self {
        Self {
            inner: Mutex::new(BoardInner::default()),
            ready: Condvar::new(),
            timeout,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BoardInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// `requested` says whether the transcript holds an unresolved request for `exec_id`.
    pub fn resolve(&self, exec_id: &str, decision: ApprovalDecision, requested: bool) -> Result<(), ResolveError> {
        let mut inner = self.lock();
        if inner.finished.contains(exec_id) || inner.decided.contains_key(exec_id) {
            return Err(ResolveError::AlreadyResolved);
        }
        if !inner.waiting.contains(exec_id) && !requested {
            return Err(ResolveError::NotFound);
        }
        inner.decided.insert(exec_id.to_string(), decision);
        self.ready.notify_all();
        Ok(())
    }

    /// Makes current and future waits time out immediately.
    pub fn cancel(&self) {
        self.lock().cancelled = true;
        self.ready.notify_all();
    }
}

impl ApprovalOracle for ApprovalBoard {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        let id = request.exec_id.clone();
        let deadline = Instant::now() + self.timeout;
        let mut inner = self.lock();
        inner.waiting.insert(id.clone());
        let decision = loop {
            if let Some(d) = inner.decided.remove(&id) {
                break d;
            }
            let now = Instant::now();
            if inner.cancelled || now >= deadline {
                break ApprovalDecision::TimedOut;
            }
            inner = self
                .ready
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        };
        inner.waiting.remove(&id);
        inner.finished.insert(id);
        decision
    }
}

enum Command {
    Input {
        text: String,
        reply: oneshot::Sender<Result<(), SessionError>>,
    },
    Close {
        reply: oneshot::Sender<Result<(), SessionError>>,
    },
    Shutdown,
}

struct SessionHandle {
    id: String,
    transcript: Transcript,
    mailbox: Mutex<mpsc::Sender<Command>>,
    busy: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    approvals: Arc<ApprovalBoard>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl SessionHandle {
    fn send(&self, command: Command) -> bool {
        self.mailbox
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .send(command)
            .is_ok()
    }

    fn summary(&self) -> SessionSummary {
        summarize(&self.transcript.events())
    }
}

fn spawn_worker(mut session: Session, busy: Arc<AtomicBool>) -> (mpsc::Sender<Command>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel::<Command>();
    let worker = std::thread::spawn(move || {
        while let Ok(command) = rx.recv() {
            match command {
                Command::Input { text, reply } => match session.submit_task(&text) {
                    Ok(_) => {
                        let _ = reply.send(Ok(()));
                        // Failures are recorded in the transcript as `session_failed`.
                        let _ = session.run_until_pause(None);
                        busy.store(false, Ordering::SeqCst);
                    }
                    Err(e) => {
                        busy.store(false, Ordering::SeqCst);
                        let _ = reply.send(Err(e));
                    }
                },
                Command::Close { reply } => {
                    session.stop_handle().store(false, Ordering::SeqCst);
                    let _ = reply.send(session.close());
                }
                Command::Shutdown => break,
            }
        }
    });
    (tx, worker)
}

struct Registry {
    settings: ConsoleSettings,
    sessions: RwLock<BTreeMap<String, Arc<SessionHandle>>>,
    order: RwLock<Vec<String>>,
}

impl Registry {
    fn get(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn insert(&self, session: Session, approvals: Arc<ApprovalBoard>) -> Arc<SessionHandle> {
        let id = session.state().session_id;
        let transcript = session.transcript().clone();
        let stop = session.stop_handle();
        let busy = Arc::new(AtomicBool::new(false));
        let (mailbox, worker) = spawn_worker(session, Arc::clone(&busy));
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            transcript,
            mailbox: Mutex::new(mailbox),
            busy,
            stop,
            approvals,
            worker: Mutex::new(Some(worker)),
        });
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::clone(&handle));
        self.order.write().unwrap_or_else(|e| e.into_inner()).push(id);
        handle
    }

    fn open(&self, id: &str, config: SessionConfig, create: bool) -> Result<Arc<SessionHandle>, String> {
        let dir = self.settings.session_root.join(id);
        let backend = (self.settings.backend)(id)?;
        let board = Arc::new(ApprovalBoard::new(self.settings.approval_timeout));
        let session = if create {
            Session::create_with_id(&dir, id.to_string(), config, backend, board.clone())
        } else {
            Session::resume(&dir, config, backend, board.clone())
        }
        .map_err(|e| e.to_string())?;
        Ok(self.insert(session, board))
    }
}

/// The console service: a session registry plus its HTTP routes.
#[derive(Clone)]
pub struct Console {
    registry: Arc<Registry>,
}

impl Console {
    pub fn new(settings: ConsoleSettings) -> Self {
        Self {
            registry: Arc::new(Registry {
                settings,
                sessions: RwLock::new(BTreeMap::new()),
                order: RwLock::new(Vec::new()),
            }),
        }
    }

    /// Reopens every session found under the session root. Returns the ids
    /// loaded and the directories that could not be opened.
    pub fn load_existing(&self) -> (Vec<String>, Vec<(PathBuf, String)>) {
        let root = &self.registry.settings.session_root;
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).collect())
            .unwrap_or_default();
        dirs.sort();
        let mut loaded = Vec::new();
        let mut failed = Vec::new();
        for dir in dirs {
            if !dir.join(TRANSCRIPT_FILE).is_file() {
                continue;
            }
            let Some(name) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            if self.registry.get(&name).is_some() {
                continue;
            }
            match self.registry.open(&name, self.registry.settings.base_config.clone(), false) {
                Ok(h) => loaded.push(h.id.clone()),
                Err(e) => failed.push((dir, e)),
            }
        }
        (loaded, failed)
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.registry.settings.session_root.join(id)
    }

    pub fn summaries(&self) -> Vec<SessionSummary> {
        let order = self.registry.order.read().unwrap_or_else(|e| e.into_inner()).clone();
        order
            .iter()
            .filter_map(|id| self.registry.get(id))
            .map(|h| h.summary())
            .collect()
    }

    pub fn router(&self) -> Router {
        let router = Router::new()
            .route("/health", get(health))
            .route("/sessions", get(list_sessions).post(create_session))
            .route("/sessions/{id}", get(get_session))
            .route("/sessions/{id}/input", post(submit_input))
            .route("/sessions/{id}/approvals/{exec_id}", post(resolve_approval))
            .route("/sessions/{id}/close", post(close_session))
            .route("/sessions/{id}/events", get(stream_events));
        let router = match self.registry.settings.auth_token.clone() {
            Some(token) => router.layer(middleware::from_fn_with_state(Arc::new(token), require_token)),
            None => router,
        };
        router.with_state(self.clone())
    }

    pub async fn serve(&self, listener: TcpListener, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        axum::serve(listener, self.router())
            .with_graceful_shutdown(shutdown)
            .await
    }

    /// Interrupts every running session at its next step boundary, fails
    /// pending approvals, and waits for the workers to stop.
    pub fn shutdown(&self) {
        let handles: Vec<Arc<SessionHandle>> = self
            .registry
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        for h in &handles {
            if h.busy.load(Ordering::SeqCst) {
                h.stop.store(true, Ordering::SeqCst);
            }
            h.approvals.cancel();
            h.send(Command::Shutdown);
        }
        for h in handles {
            if let Some(worker) = h.worker.lock().unwrap_or_else(|e| e.into_inner()).take() {
                let _ = worker.join();
            }
        }
    }
}

async fn require_token(State(token): State<Arc<String>>, request: Request, next: Next) -> Response {
    let bearer = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    let query = request.uri().query().and_then(|q| {
        q.split('&')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == "access_token")
            .map(|(_, v)| v.to_string())
    });
    if bearer.as_deref() == Some(token.as_str()) || query.as_deref() == Some(token.as_str()) {
        next.run(request).await
    } else {
        error(StatusCode::UNAUTHORIZED, "missing or invalid bearer token")
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn list_sessions(State(console): State<Console>) -> Json<Vec<SessionSummary>> {
    Json(console.summaries())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionOverrides {
    max_steps: Option<u32>,
    history_window: Option<usize>,
    model_id: Option<String>,
    temperature: Option<f64>,
}

impl SessionOverrides {
    fn apply(self, mut config: SessionConfig) -> Result<SessionConfig, String> {
        if let Some(n) = self.max_steps {
            if n == 0 {
                return Err("max_steps must be positive".into());
            }
            config.max_steps = n;
        }
        if let Some(n) = self.history_window {
            if n == 0 {
                return Err("history_window must be positive".into());
            }
            config.history_window = n;
        }
        if let Some(m) = self.model_id {
            if m.trim().is_empty() {
                return Err("model_id must not be blank".into());
            }
            config.model_id = m;
        }
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                return Err("temperature must be within 0..=2".into());
            }
            config.temperature = t;
        }
        Ok(config)
    }
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, String> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| e.to_string())
}

async fn create_session(State(console): State<Console>, body: Bytes) -> Response {
    let overrides: SessionOverrides = match parse_body(&body) {
        Ok(o) => o,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let config = match overrides.apply(console.registry.settings.base_config.clone()) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let registry = Arc::clone(&console.registry);
    let opened = tokio::task::spawn_blocking(move || {
        let id = uuid::Uuid::new_v4().to_string();
        registry.open(&id, config, true)
    })
    .await;
    match opened {
        Ok(Ok(handle)) => (StatusCode::CREATED, Json(handle.summary())).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_session(State(console): State<Console>, UrlPath(id): UrlPath<String>) -> Response {
    match console.registry.get(&id) {
        Some(h) => Json(h.summary()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown session {id}")),
    }
}

#[derive(Debug, Default, Deserialize)]
struct InputBody {
    #[serde(default)]
    text: String,
}

async fn submit_input(
    State(console): State<Console>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Response {
    let Some(handle) = console.registry.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    let input: InputBody = match parse_body(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    if input.text.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "input text is blank");
    }
    if handle
        .busy
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return error(StatusCode::CONFLICT, "session is stepping");
    }
    let status = handle.transcript.state().status;
    if !status.accepts_input() {
        handle.busy.store(false, Ordering::SeqCst);
        return error(StatusCode::CONFLICT, format!("session is {status}"));
    }
    let (reply, answer) = oneshot::channel();
    if !handle.send(Command::Input { text: input.text, reply }) {
        handle.busy.store(false, Ordering::SeqCst);
        return error(StatusCode::CONFLICT, "session worker has stopped");
    }
    match answer.await {
        Ok(Ok(())) => (StatusCode::ACCEPTED, Json(handle.summary())).into_response(),
        Ok(Err(SessionError::BlankTask)) => error(StatusCode::UNPROCESSABLE_ENTITY, "input text is blank"),
        Ok(Err(SessionError::InvalidState(s))) => error(StatusCode::CONFLICT, format!("session is {s}")),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "session worker dropped the request"),
    }
}

#[derive(Debug, Default, Deserialize)]
struct ApprovalBody {
    decision: Option<String>,
}

/// Approval state of `exec_id` in the transcript: (requested, resolved).
fn approval_state(events: &[TranscriptEvent], exec_id: &str) -> (bool, bool) {
    let mut requested = false;
    let mut resolved = false;
    for e in events {
        match &e.event {
            Event::ApprovalRequested { request, .. } if request.exec_id == exec_id => requested = true,
            Event::ApprovalResolved { exec_id: id, .. } if id == exec_id => resolved = true,
            _ => {}
        }
    }
    (requested, resolved)
}

async fn resolve_approval(
    State(console): State<Console>,
    UrlPath((id, exec_id)): UrlPath<(String, String)>,
    body: Bytes,
) -> Response {
    let Some(handle) = console.registry.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    let decision = match parse_body::<ApprovalBody>(&body).map(|b| b.decision) {
        Ok(Some(d)) if d == "approve" => ApprovalDecision::Approve,
        Ok(Some(d)) if d == "deny" => ApprovalDecision::Deny,
        Ok(_) => return error(StatusCode::BAD_REQUEST, "decision must be \"approve\" or \"deny\""),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let (requested, resolved) = approval_state(&handle.transcript.events(), &exec_id);
    if resolved {
        return error(StatusCode::CONFLICT, format!("approval {exec_id} already resolved"));
    }
    match handle.approvals.resolve(&exec_id, decision, requested) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(ResolveError::AlreadyResolved) => {
            error(StatusCode::CONFLICT, format!("approval {exec_id} already resolved"))
        }
        Err(ResolveError::NotFound) => error(StatusCode::NOT_FOUND, format!("no pending approval {exec_id}")),
    }
}

async fn close_session(State(console): State<Console>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(handle) = console.registry.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    if handle.transcript.state().status == SessionStatus::Closed {
        return error(StatusCode::CONFLICT, "session already closed");
    }
    if handle.busy.load(Ordering::SeqCst) {
        handle.stop.store(true, Ordering::SeqCst);
        handle.approvals.cancel();
    }
    let (reply, answer) = oneshot::channel();
    if !handle.send(Command::Close { reply }) {
        return error(StatusCode::CONFLICT, "session worker has stopped");
    }
    match answer.await {
        Ok(Ok(())) => Json(handle.summary()).into_response(),
        Ok(Err(SessionError::Transcript(transcript::TranscriptError::Closed))) => {
            error(StatusCode::CONFLICT, "session already closed")
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "session worker dropped the request"),
    }
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from: u64,
}

async fn stream_events(
    State(console): State<Console>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    let handle = console.registry.get(&id);
    let buffer = console.registry.settings.stream_buffer.max(1);
    ws.on_upgrade(move |socket| async move {
        match handle {
            Some(h) => pump(socket, h, query.from, buffer).await,
            None => {
                let mut socket = socket;
                let frame = serde_json::json!({ "error": "unknown session", "session_id": id });
                let _ = socket.send(Message::Text(frame.to_string().into())).await;
                let _ = socket
                    .send(Message::Close(Some(CloseFrame {
                        code: CLOSE_UNKNOWN_SESSION,
                        reason: "unknown session".into(),
                    })))
                    .await;
            }
        }
    })
}

/// Subscriber feeding a bounded channel. A full or closed channel drops the
/// subscription, which ends the receiver after it drains.
fn forward_to(tx: tokio::sync::mpsc::Sender<TranscriptEvent>) -> impl FnMut(&TranscriptEvent) -> bool + Send {
    move |e| tx.try_send(e.clone()).is_ok()
}

async fn pump(socket: WebSocket, handle: Arc<SessionHandle>, from: u64, buffer: usize) {
    let (tx, mut rx) = tokio::sync::mpsc::channel::<TranscriptEvent>(buffer);
    let backlog = handle.transcript.subscribe_from(from, forward_to(tx));
    let (mut sink, mut incoming) = socket.split();

    let close = |code: u16, reason: &'static str| {
        Message::Close(Some(CloseFrame {
            code,
            reason: reason.into(),
        }))
    };
    let mut closed_seen = false;
    for record in backlog {
        closed_seen |= matches!(record.event, Event::SessionClosed {});
        if sink.send(Message::Text(record.to_json_line().into())).await.is_err() {
            return;
        }
    }
    if closed_seen || handle.transcript.state().status == SessionStatus::Closed && handle.transcript.len() as u64 <= from {
        let _ = sink.send(close(CLOSE_NORMAL, "session closed")).await;
        return;
    }
    loop {
        tokio::select! {
            next = rx.recv() => match next {
                Some(record) => {
                    let done = matches!(record.event, Event::SessionClosed {});
                    if sink.send(Message::Text(record.to_json_line().into())).await.is_err() {
                        return;
                    }
                    if done {
                        let _ = sink.send(close(CLOSE_NORMAL, "session closed")).await;
                        return;
                    }
                }
                None => {
                    let _ = sink.send(close(CLOSE_TOO_SLOW, "consumer too slow; reconnect with from")).await;
                    return;
                }
            },
            msg = incoming.next() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

/// Path of a session's transcript under `session_root`.
pub fn transcript_path(session_root: &Path, id: &str) -> PathBuf {
    session_root.join(id).join(TRANSCRIPT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use forgeloop::transcript::Event;

    #[test]
    fn overflowing_subscriber_is_dropped_after_buffered_events() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = Transcript::open(dir.path()).unwrap();
        let (tx, mut rx) = tokio::sync::mpsc::channel(2);
        t.subscribe_from(0, forward_to(tx));
        t.append(Event::SessionOpened { session_id: "s".into(), max_steps: 3 }).unwrap();
        t.append(Event::TaskSubmitted { task: "a".into() }).unwrap();
        t.append(Event::SessionClosed {}).unwrap();
        assert_eq!(rx.blocking_recv().unwrap().seq, 0);
        assert_eq!(rx.blocking_recv().unwrap().seq, 1);
        assert!(rx.blocking_recv().is_none(), "third event overflowed and ended the stream");
    }

    #[test]
    fn early_and_duplicate_approvals() {
        let board = ApprovalBoard::new(Duration::from_secs(5));
        assert_eq!(board.resolve("0-0", ApprovalDecision::Approve, false), Err(ResolveError::NotFound));
        // Decision lands after the request event but before the executor waits.
        board.resolve("0-0", ApprovalDecision::Deny, true).unwrap();
        assert_eq!(board.resolve("0-0", ApprovalDecision::Approve, true), Err(ResolveError::AlreadyResolved));
        let req = ApprovalRequest {
            exec_id: "0-0".into(),
            command: "x".into(),
            shell_tag: "sh".into(),
            step: 0,
            ordinal: 0,
        };
        assert_eq!(board.decide(&req), ApprovalDecision::Deny);
        assert_eq!(board.resolve("0-0", ApprovalDecision::Approve, true), Err(ResolveError::AlreadyResolved));
        board.cancel();
        let later = ApprovalRequest { exec_id: "1-0".into(), ..req };
        assert_eq!(board.decide(&later), ApprovalDecision::TimedOut);
    }
}
