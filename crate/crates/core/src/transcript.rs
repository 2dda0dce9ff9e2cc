//! Append-only session transcript stored as JSON Lines.
//!
//! Each line is `{"seq": .., "t": .., "kind": .., "payload": ..}`. `seq` is
//! dense from 0. Every append is validated against the session state machine
//! and synced to disk before it is acknowledged.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::StorageFailure;
use crate::executor::{ApprovalDecision, ApprovalRequest, ExecutionRecord};
use crate::gateway::{ChatMessage, FinishReason, ResponseSource};
use crate::parser::BlockClass;
use crate::session::{PauseReason, SessionState, StepOutcome};
use crate::snippets::StagedSnippet;

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

/// Payload keys left out of [`content_hash`]: timing, identity and digests
/// over prompts that embed the session path.
pub const HASH_EXCLUDED_KEYS: &[&str] = &[
    "t",
    "latency_ms",
    "duration_ms",
    "started_at_ms",
    "finished_at_ms",
    "session_id",
    "prompt_digest",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub ordinal: usize,
    pub info_tag: String,
    pub span: (usize, usize),
    #[serde(flatten)]
    pub class: BlockClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    SessionOpened {
        session_id: String,
        max_steps: u32,
    },
    TaskSubmitted {
        task: String,
    },
    Resumed {
        input: String,
        max_steps: u32,
    },
    ModelQueried {
        step: u32,
        prompt_digest: String,
        message_count: usize,
    },
    ModelResponded {
        step: u32,
        text: String,
        finish_reason: FinishReason,
        latency_ms: u64,
        #[serde(flatten)]
        source: ResponseSource,
    },
    BlocksParsed {
        step: u32,
        blocks: Vec<BlockSummary>,
        human_input_requested: bool,
        terminal: bool,
    },
    SnippetStaged {
        step: u32,
        snippet: StagedSnippet,
    },
    ApprovalRequested {
        step: u32,
        request: ApprovalRequest,
    },
    ApprovalResolved {
        step: u32,
        exec_id: String,
        decision: ApprovalDecision,
    },
    CommandStarted {
        step: u32,
        ordinal: usize,
        command: String,
        shell_tag: String,
    },
    CommandFinished {
        step: u32,
        ordinal: usize,
        record: ExecutionRecord,
    },
    StepCompleted {
        step: u32,
        outcome: StepOutcome,
        next_prompt: Option<ChatMessage>,
    },
    Paused {
        reason: PauseReason,
        step_index: u32,
    },
    SessionFailed {
        step: u32,
        cause: String,
    },
    SessionClosed {},
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::SessionOpened { .. } => "session_opened",
            Event::TaskSubmitted { .. } => "task_submitted",
            Event::Resumed { .. } => "resumed",
            Event::ModelQueried { .. } => "model_queried",
            Event::ModelResponded { .. } => "model_responded",
            Event::BlocksParsed { .. } => "blocks_parsed",
            Event::SnippetStaged { .. } => "snippet_staged",
            Event::ApprovalRequested { .. } => "approval_requested",
            Event::ApprovalResolved { .. } => "approval_resolved",
            Event::CommandStarted { .. } => "command_started",
            Event::CommandFinished { .. } => "command_finished",
            Event::StepCompleted { .. } => "step_completed",
            Event::Paused { .. } => "paused",
            Event::SessionFailed { .. } => "session_failed",
            Event::SessionClosed {} => "session_closed",
        }
    }

    /// Events after which the session is at a step boundary.
    pub fn is_boundary(&self) -> bool {
        !matches!(
            self,
            Event::ModelQueried { .. }
                | Event::ModelResponded { .. }
                | Event::BlocksParsed { .. }
                | Event::SnippetStaged { .. }
                | Event::ApprovalRequested { .. }
                | Event::ApprovalResolved { .. }
                | Event::CommandStarted { .. }
                | Event::CommandFinished { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub t: String,
    #[serde(flatten)]
    pub event: Event,
}

impl TranscriptEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("transcript events always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error(transparent)]
    Storage(#[from] StorageFailure),
    #[error("session is closed")]
    Closed,
    #[error("event {kind} not valid while session is {status}")]
    InvalidEvent { kind: String, status: String },
    #[error("corrupt transcript at seq {seq}: {cause}")]
    CorruptTranscript { seq: u64, cause: String },
}

/// Result of reading a transcript file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedTranscript {
    pub events: Vec<TranscriptEvent>,
    /// State at the last step boundary; an unfinished trailing step is rolled back.
    pub state: SessionState,
    /// Error for the first unreadable record, if any. Loading stops there.
    pub corruption: Option<TranscriptError>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    pub rolled_back_events: usize,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Reads and validates a transcript, stopping at the first bad record.
pub fn load(path: &Path) -> Result<LoadedTranscript, TranscriptError> {
    let session_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(StorageFailure::new(path, e).into()),
    };

    let mut events = Vec::new();
    let mut live = SessionState::new(session_dir.clone());
    let mut boundary = live.clone();
    let mut since_boundary = 0;
    let mut corruption = None;
    let mut valid_len = 0u64;
    let mut offset = 0usize;

    for raw in bytes.split_inclusive(|b| *b == b'\n') {
        let seq = events.len() as u64;
        let corrupt = |cause: String| TranscriptError::CorruptTranscript { seq, cause };
        if !raw.ends_with(b"\n") {
            corruption = Some(corrupt("torn final record".into()));
            break;
        }
        let parsed = std::str::from_utf8(raw)
            .map_err(|e| corrupt(e.to_string()))
            .and_then(|line| serde_json::from_str::<TranscriptEvent>(line).map_err(|e| corrupt(e.to_string())));
        let record = match parsed {
            Ok(r) => r,
            Err(e) => {
                corruption = Some(e);
                break;
            }
        };
        if record.seq != seq {
            corruption = Some(corrupt(format!("expected seq {seq}, found {}", record.seq)));
            break;
        }
        if let Err(e) = live.apply(&record.event) {
            corruption = Some(corrupt(e.to_string()));
            break;
        }
        if record.event.is_boundary() {
            boundary = live.clone();
            since_boundary = 0;
        } else {
            since_boundary += 1;
        }
        offset += raw.len();
        valid_len = offset as u64;
        events.push(record);
    }

    Ok(LoadedTranscript {
        events,
        state: boundary,
        corruption,
        valid_len,
        rolled_back_events: since_boundary,
    })
}

/// Returns `false` to unsubscribe.
type Subscriber = Box<dyn FnMut(&TranscriptEvent) -> bool + Send>;

struct Inner {
    path: PathBuf,
    file: File,
    events: Vec<TranscriptEvent>,
    state: SessionState,
    subscribers: Vec<Subscriber>,
}

/// Shared handle to a session transcript. Clones refer to the same log.
#[derive(Clone)]
pub struct Transcript {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("Transcript")
            .field("path", &inner.path)
            .field("events", &inner.events.len())
            .finish()
    }
}

impl Transcript {
    /// Opens `<session_dir>/transcript.jsonl`, creating it if needed. An
    /// existing file is loaded; a torn tail is cut off so appends continue
    /// from the valid prefix, and an unfinished step is rolled back.
    pub fn open(session_dir: &Path) -> Result<(Self, LoadedTranscript), TranscriptError> {
        fs::create_dir_all(session_dir).map_err(|e| StorageFailure::new(session_dir, e))?;
        let path = session_dir.join(TRANSCRIPT_FILE);
        let loaded = load(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StorageFailure::new(&path, e))?;
        file.set_len(loaded.valid_len)
            .map_err(|e| StorageFailure::new(&path, e))?;
        let transcript = Transcript {
            inner: Arc::new(Mutex::new(Inner {
                path,
                file,
                events: loaded.events.clone(),
                state: loaded.state.clone(),
                subscribers: Vec::new(),
            })),
        };
        Ok((transcript, loaded))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn path(&self) -> PathBuf {
        self.lock().path.clone()
    }

    pub fn append(&self, event: Event) -> Result<u64, TranscriptError> {
        let mut inner = self.lock();
        if inner.state.is_closed() {
            return Err(TranscriptError::Closed);
        }
        let mut next = inner.state.clone();
        next.apply(&event)?;

        let record = TranscriptEvent {
            seq: inner.events.len() as u64,
            t: now_rfc3339(),
            event,
        };
        let mut line = record.to_json_line();
        line.push('\n');
        let path = inner.path.clone();
        inner
            .file
            .write_all(line.as_bytes())
            .and_then(|_| inner.file.sync_data())
            .map_err(|e| StorageFailure::new(&path, e))?;

        inner.state = next;
        inner.subscribers.retain_mut(|subscriber| subscriber(&record));
        let seq = record.seq;
        inner.events.push(record);
        Ok(seq)
    }

    pub fn state(&self) -> SessionState {
        self.lock().state.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<TranscriptEvent> {
        self.lock().events.clone()
    }

    pub fn events_from(&self, from_seq: u64) -> Vec<TranscriptEvent> {
        let inner = self.lock();
        inner.events.iter().skip(from_seq as usize).cloned().collect()
    }

    /// Returns the backlog from `from_seq` and registers `subscriber` for
    /// every later append, atomically, so nothing is missed or duplicated.
    /// The subscriber is dropped once it returns `false`.
    pub fn subscribe_from(
        &self,
        from_seq: u64,
        subscriber: impl FnMut(&TranscriptEvent) -> bool + Send + 'static,
    ) -> Vec<TranscriptEvent> {
        let mut inner = self.lock();
        let backlog = inner.events.iter().skip(from_seq as usize).cloned().collect();
        inner.subscribers.push(Box::new(subscriber));
        backlog
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.lock().events)
    }
}

fn normalize(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for key in HASH_EXCLUDED_KEYS {
                map.remove(*key);
            }
            map.values_mut().for_each(normalize);
        }
        Value::Array(items) => items.iter_mut().for_each(normalize),
        Value::String(s) if s.contains('\r') => *s = s.replace("\r\n", "\n"),
        _ => {}
    }
}

/// Digest over all events with timing and identity fields removed and
/// platform newlines normalized.
pub fn content_hash(events: &[TranscriptEvent]) -> String {
    let mut hasher = Sha256::new();
    for event in events {
        let mut value = serde_json::to_value(event).expect("transcript events always serialize");
        normalize(&mut value);
        hasher.update(value.to_string().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::SessionStatus;

    fn opened() -> Event {
        Event::SessionOpened {
            session_id: "s".into(),
            max_steps: 5,
        }
    }

    #[test]
    fn seq_is_dense_from_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = Transcript::open(dir.path()).unwrap();
        assert_eq!(t.append(opened()).unwrap(), 0);
        assert_eq!(t.append(Event::TaskSubmitted { task: "x".into() }).unwrap(), 1);
        assert_eq!(t.state().status, SessionStatus::Stepping);
    }

    #[test]
    fn append_after_close_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = Transcript::open(dir.path()).unwrap();
        t.append(opened()).unwrap();
        t.append(Event::SessionClosed {}).unwrap();
        assert_eq!(
            t.append(Event::TaskSubmitted { task: "x".into() }),
            Err(TranscriptError::Closed)
        );
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn invalid_transition_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = Transcript::open(dir.path()).unwrap();
        t.append(opened()).unwrap();
        let err = t
            .append(Event::ModelQueried {
                step: 0,
                prompt_digest: "d".into(),
                message_count: 1,
            })
            .unwrap_err();
        assert!(matches!(err, TranscriptError::InvalidEvent { .. }));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn wire_shape() {
        let e = TranscriptEvent {
            seq: 3,
            t: "2024-01-01T00:00:00.000Z".into(),
            event: Event::TaskSubmitted { task: "go".into() },
        };
        let v: Value = serde_json::from_str(&e.to_json_line()).unwrap();
        assert_eq!(v["seq"], 3);
        assert_eq!(v["kind"], "task_submitted");
        assert_eq!(v["payload"]["task"], "go");
        assert_eq!(serde_json::from_value::<TranscriptEvent>(v).unwrap(), e);
    }

    #[test]
    fn empty_file_loads_fresh_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRANSCRIPT_FILE);
        File::create(&path).unwrap();
        let loaded = load(&path).unwrap();
        assert!(loaded.events.is_empty());
        assert_eq!(loaded.state.status, SessionStatus::AwaitingTask);
        assert!(loaded.corruption.is_none());
    }

    #[test]
    fn torn_tail_loads_prefix_and_is_cut_on_open() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (t, _) = Transcript::open(dir.path()).unwrap();
            t.append(opened()).unwrap();
            t.append(Event::TaskSubmitted { task: "x".into() }).unwrap();
        }
        let path = dir.path().join(TRANSCRIPT_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":2,\"t\":\"x\",\"kind\":\"pau").unwrap();
        drop(f);

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.events.len(), 2);
        assert!(matches!(
            loaded.corruption,
            Some(TranscriptError::CorruptTranscript { seq: 2, .. })
        ));

        let (t, _) = Transcript::open(dir.path()).unwrap();
        assert_eq!(
            t.append(Event::Paused {
                reason: PauseReason::MarkerRequested,
                step_index: 0
            })
            .unwrap(),
            2
        );
        let reloaded = load(&path).unwrap();
        assert!(reloaded.corruption.is_none());
        assert_eq!(reloaded.events.len(), 3);
    }

    #[test]
    fn hash_ignores_time_and_sees_content() {
        let mk = |t: &str, text: &str| TranscriptEvent {
            seq: 0,
            t: t.into(),
            event: Event::TaskSubmitted { task: text.into() },
        };
        assert_eq!(
            content_hash(&[mk("a", "x")]),
            content_hash(&[mk("b", "x")])
        );
        assert_ne!(content_hash(&[mk("a", "x")]), content_hash(&[mk("a", "y")]));
        assert_eq!(
            content_hash(&[mk("a", "x\r\ny")]),
            content_hash(&[mk("a", "x\ny")])
        );
    }

    #[test]
    fn subscribers_see_appends_after_backlog() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = Transcript::open(dir.path()).unwrap();
        t.append(opened()).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&seen);
        let backlog = t.subscribe_from(0, move |e| {
            sink.lock().unwrap().push(e.seq);
            true
        });
        assert_eq!(backlog.len(), 1);
        t.append(Event::TaskSubmitted { task: "x".into() }).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![1]);

        let calls = Arc::new(Mutex::new(0));
        let counter = Arc::clone(&calls);
        t.subscribe_from(99, move |_| {
            *counter.lock().unwrap() += 1;
            false
        });
        t.append(Event::SessionClosed {}).unwrap();
        assert_eq!(*calls.lock().unwrap(), 1);
        assert_eq!(*seen.lock().unwrap(), vec![1, 2]);
        assert_eq!(t.lock().subscribers.len(), 1);
    }
}
