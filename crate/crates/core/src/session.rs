//! The agent loop: an outer task loop waiting on human input and an inner
//! step loop of query, parse, stage, execute.
//!
//! Session status only changes through transcript events, so the state held
//! here and the state rebuilt from `transcript.jsonl` cannot drift apart.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::StorageFailure;
use crate::executor::{
    ApprovalDecision, ApprovalOracle, ApprovalRequest, CommandRequest, ExecutionListener,
    ExecutionRecord, Executor,
};
use crate::gateway::{ChatMessage, CompletionBackend, GatewayError, ModelRequest, ModelResponse, Role};
use crate::parser::{self, ParsedResponse, ParserConfig};
use crate::policy::Policy;
use crate::prompt::{self, PromptError, PromptTemplateSet};
use crate::snippets::{self, StagedSnippet};
use crate::transcript::{BlockSummary, Event, Transcript, TranscriptError, TranscriptEvent};

pub const DEFAULT_MAX_STEPS: u32 = 30;
pub const DEFAULT_HISTORY_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PauseReason {
    MarkerRequested,
    NoActionableOutput,
    ApprovalPending,
    MaxStepsReached,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingTask,
    Stepping,
    AwaitingHuman { reason: PauseReason },
    Failed { cause: String },
    Closed,
}

impl SessionStatus {
    pub fn name(&self) -> &'static str {
        match self {
            SessionStatus::AwaitingTask => "awaiting_task",
            SessionStatus::Stepping => "stepping",
            SessionStatus::AwaitingHuman { .. } => "awaiting_human",
            SessionStatus::Failed { .. } => "failed",
            SessionStatus::Closed => "closed",
        }
    }

    /// Whether human input (a task or a follow-up) is accepted now.
    pub fn accepts_input(&self) -> bool {
        match self {
            SessionStatus::AwaitingTask | SessionStatus::Failed { .. } => true,
            SessionStatus::AwaitingHuman { reason } => *reason != PauseReason::ApprovalPending,
            SessionStatus::Stepping | SessionStatus::Closed => false,
        }
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionStatus::AwaitingHuman { reason } => write!(f, "awaiting_human({reason:?})"),
            SessionStatus::Failed { cause } => write!(f, "failed({cause})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    #[serde(flatten)]
    pub status: SessionStatus,
    pub task: Option<String>,
    pub step_index: u32,
    pub max_steps: u32,
    pub session_dir: PathBuf,
}

impl SessionState {
    pub fn new(session_dir: PathBuf) -> Self {
        Self {
            session_id: String::new(),
            status: SessionStatus::AwaitingTask,
            task: None,
            step_index: 0,
            max_steps: DEFAULT_MAX_STEPS,
            session_dir,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.status == SessionStatus::Closed
    }

    fn invalid(&self, event: &Event) -> TranscriptError {
        TranscriptError::InvalidEvent {
            kind: event.kind().to_string(),
            status: self.status.to_string(),
        }
    }

    /// Applies one event under the session transition relation.
    pub fn apply(&mut self, event: &Event) -> Result<(), TranscriptError> {
        use SessionStatus::*;
        let stepping = self.status == Stepping;
        match event {
            Event::SessionOpened { session_id, max_steps } => {
                if !self.session_id.is_empty() || self.status != AwaitingTask || *max_steps == 0 {
                    return Err(self.invalid(event));
                }
                self.session_id = session_id.clone();
                self.max_steps = *max_steps;
            }
            Event::TaskSubmitted { task } => {
                if self.status != AwaitingTask {
                    return Err(self.invalid(event));
                }
                self.task = Some(task.clone());
                self.status = Stepping;
            }
            Event::Resumed { input, max_steps } => {
                if !self.status.accepts_input()
                    || self.status == AwaitingTask
                    || *max_steps < self.step_index
                {
                    return Err(self.invalid(event));
                }
                self.task = Some(input.clone());
                self.max_steps = *max_steps;
                self.status = Stepping;
            }
            Event::ModelQueried { step, .. } => {
                if !stepping || *step != self.step_index || self.step_index >= self.max_steps {
                    return Err(self.invalid(event));
                }
            }
            Event::ModelResponded { step, .. }
            | Event::BlocksParsed { step, .. }
            | Event::SnippetStaged { step, .. }
            | Event::CommandStarted { step, .. }
            | Event::CommandFinished { step, .. } => {
                if !stepping || *step != self.step_index {
                    return Err(self.invalid(event));
                }
            }
            Event::ApprovalRequested { step, .. } => {
                if !stepping || *step != self.step_index {
                    return Err(self.invalid(event));
                }
                self.status = AwaitingHuman {
                    reason: PauseReason::ApprovalPending,
                };
            }
            Event::ApprovalResolved { step, .. } => {
                let pending = AwaitingHuman {
                    reason: PauseReason::ApprovalPending,
                };
                if self.status != pending || *step != self.step_index {
                    return Err(self.invalid(event));
                }
                self.status = Stepping;
            }
            Event::StepCompleted { step, .. } => {
                if !stepping || *step != self.step_index {
                    return Err(self.invalid(event));
                }
                self.step_index += 1;
            }
            Event::Paused { reason, .. } => {
                if !stepping || *reason == PauseReason::ApprovalPending {
                    return Err(self.invalid(event));
                }
                self.status = AwaitingHuman { reason: *reason };
            }
            Event::SessionFailed { cause, .. } => {
                if self.status == Closed {
                    return Err(self.invalid(event));
                }
                self.status = Failed { cause: cause.clone() };
            }
            Event::SessionClosed {} => {
                if self.status == Closed {
                    return Err(self.invalid(event));
                }
                self.status = Closed;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum StepOutcome {
    Continue,
    Pause(PauseReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step_index: u32,
    pub prompt_digest: String,
    pub response: ModelResponse,
    pub parsed: ParsedResponse,
    pub staged: Vec<StagedSnippet>,
    pub executions: Vec<ExecutionRecord>,
    pub outcome: StepOutcome,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("operation not valid while session is {0}")]
    InvalidState(SessionStatus),
    #[error("task text is blank")]
    BlankTask,
    #[error("session directory {0} already holds a transcript")]
    AlreadyExists(PathBuf),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Storage(#[from] StorageFailure),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Everything a session needs besides its backend and approval oracle.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub max_steps: u32,
    pub history_window: usize,
    pub model_id: String,
    pub temperature: f64,
    pub max_response_chars: usize,
    pub parser: ParserConfig,
    pub templates: PromptTemplateSet,
    pub policy: Policy,
    /// Extra environment variables for executed commands.
    pub command_env: Vec<(String, String)>,
    pub shells: std::collections::BTreeMap<String, Vec<String>>,
    /// Keep raw command output bytes in sidecar files.
    pub raw_capture: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            history_window: DEFAULT_HISTORY_WINDOW,
            model_id: "gpt-4-1106-preview".into(),
            temperature: 0.0,
            max_response_chars: 0,
            parser: ParserConfig::default(),
            templates: PromptTemplateSet::default(),
            policy: Policy::default(),
            command_env: Vec::new(),
            shells: Default::default(),
            raw_capture: false,
        }
    }
}

/// Writes executor progress into the transcript. The first append failure
/// is kept and surfaced after execution finishes.
struct TranscriptListener<'a> {
    transcript: &'a Transcript,
    step: u32,
    error: Option<TranscriptError>,
}

impl TranscriptListener<'_> {
    fn emit(&mut self, event: Event) {
        if self.error.is_none() {
            if let Err(e) = self.transcript.append(event) {
                self.error = Some(e);
            }
        }
    }
}

impl ExecutionListener for TranscriptListener<'_> {
    fn approval_requested(&mut self, request: &ApprovalRequest) {
        self.emit(Event::ApprovalRequested {
            step: self.step,
            request: request.clone(),
        });
    }

    fn approval_resolved(&mut self, request: &ApprovalRequest, decision: ApprovalDecision) {
        self.emit(Event::ApprovalResolved {
            step: self.step,
            exec_id: request.exec_id.clone(),
            decision,
        });
    }

    fn command_started(&mut self, request: &CommandRequest) {
        self.emit(Event::CommandStarted {
            step: self.step,
            ordinal: request.ordinal,
            command: request.command.clone(),
            shell_tag: request.shell_tag.clone(),
        });
    }

    fn command_finished(&mut self, record: &ExecutionRecord) {
        self.emit(Event::CommandFinished {
            step: self.step,
            ordinal: record.request.ordinal,
            record: record.clone(),
        });
    }
}

/// Rebuilds the conversation (without the system message) from completed
/// steps in a transcript.
pub fn history_from_events(events: &[TranscriptEvent]) -> Vec<ChatMessage> {
    let mut history = Vec::new();
    let mut pending: Option<ChatMessage> = None;
    for record in events {
        match &record.event {
            Event::TaskSubmitted { task } => history.push(ChatMessage::new(Role::User, task.clone())),
            Event::Resumed { input, .. } => history.push(ChatMessage::new(Role::User, input.clone())),
            Event::ModelResponded { text, .. } => {
                pending = Some(ChatMessage::new(Role::Assistant, text.clone()))
            }
            Event::StepCompleted { next_prompt, .. } => {
                history.extend(pending.take());
                history.extend(next_prompt.clone());
            }
            Event::SessionFailed { .. } => pending = None,
            _ => {}
        }
    }
    history
}

pub struct Session {
    config: SessionConfig,
    transcript: Transcript,
    executor: Executor,
    backend: Box<dyn CompletionBackend>,
    approval: Arc<dyn ApprovalOracle>,
    system_message: ChatMessage,
    history: Vec<ChatMessage>,
    stop: Arc<AtomicBool>,
    session_dir: PathBuf,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("state", &self.state())
            .field("history_len", &self.history.len())
            .finish()
    }
}

impl Session {
    /// Starts a new session in `session_dir`, which must not already hold a transcript.
    pub fn create(
        session_dir: &Path,
        config: SessionConfig,
        backend: Box<dyn CompletionBackend>,
        approval: Arc<dyn ApprovalOracle>,
    ) -> Result<Self, SessionError> {
        Self::create_with_id(session_dir, uuid::Uuid::new_v4().to_string(), config, backend, approval)
    }

    pub fn create_with_id(
        session_dir: &Path,
        session_id: String,
        config: SessionConfig,
        backend: Box<dyn CompletionBackend>,
        approval: Arc<dyn ApprovalOracle>,
    ) -> Result<Self, SessionError> {
        let (transcript, loaded) = Transcript::open(session_dir)?;
        if !loaded.events.is_empty() {
            return Err(SessionError::AlreadyExists(session_dir.to_path_buf()));
        }
        transcript.append(Event::SessionOpened {
            session_id,
            max_steps: config.max_steps.max(1),
        })?;
        Self::assemble(session_dir, config, backend, approval, transcript, Vec::new())
    }

    /// Reopens a session from its transcript, rolling back an unfinished step.
    pub fn resume(
        session_dir: &Path,
        config: SessionConfig,
        backend: Box<dyn CompletionBackend>,
        approval: Arc<dyn ApprovalOracle>,
    ) -> Result<Self, SessionError> {
        let (transcript, loaded) = Transcript::open(session_dir)?;
        if loaded.events.is_empty() {
            return Self::create(session_dir, config, backend, approval);
        }
        let history = history_from_events(&loaded.events);
        Self::assemble(session_dir, config, backend, approval, transcript, history)
    }

    fn assemble(
        session_dir: &Path,
        config: SessionConfig,
        backend: Box<dyn CompletionBackend>,
        approval: Arc<dyn ApprovalOracle>,
        transcript: Transcript,
        history: Vec<ChatMessage>,
    ) -> Result<Self, SessionError> {
        let facts = prompt::env_facts(session_dir, &config.parser);
        let system_message = ChatMessage::new(
            Role::System,
            prompt::render_system(&config.templates, &facts)?,
        );
        let executor = Executor::new(session_dir)
            .with_shells(config.shells.clone())
            .with_env(config.command_env.clone())
            .with_raw_capture(config.raw_capture);
        Ok(Self {
            config,
            transcript,
            executor,
            backend,
            approval,
            system_message,
            history,
            stop: Arc::new(AtomicBool::new(false)),
            session_dir: session_dir.to_path_buf(),
        })
    }

    pub fn state(&self) -> SessionState {
        self.transcript.state()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn session_dir(&self) -> &Path {
        &self.session_dir
    }

    pub fn history(&self) -> &[ChatMessage] {
        &self.history
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Flag checked before every step; setting it pauses the session with
    /// [`PauseReason::Interrupted`] at the next step boundary.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Messages sent for the next query: system instructions plus the most
    /// recent `history_window` conversation messages.
    pub fn request_messages(&self) -> Vec<ChatMessage> {
        let window = self.config.history_window.max(1);
        let start = self.history.len().saturating_sub(window);
        std::iter::once(self.system_message.clone())
            .chain(self.history[start..].iter().cloned())
            .collect()
    }

    /// Accepts a task (fresh session) or follow-up input (paused or failed session).
    pub fn submit_task(&mut self, text: &str) -> Result<SessionState, SessionError> {
        let state = self.state();
        if !state.status.accepts_input() {
            return Err(SessionError::InvalidState(state.status));
        }
        if text.trim().is_empty() {
            return Err(SessionError::BlankTask);
        }
        if state.status == SessionStatus::AwaitingTask {
            let messages = prompt::render_initial(
                text,
                &self.config.templates,
                &prompt::env_facts(&self.session_dir, &self.config.parser),
            )?;
            self.transcript.append(Event::TaskSubmitted { task: text.to_string() })?;
            self.history.extend(messages.into_iter().skip(1));
        } else {
            let message = prompt::render_resume(text)?;
            // Hitting the bound grants a fresh step budget on the next input.
            let max_steps = if state.step_index >= state.max_steps {
                state.step_index + self.config.max_steps.max(1)
            } else {
                state.max_steps
            };
            self.transcript.append(Event::Resumed {
                input: text.to_string(),
                max_steps,
            })?;
            self.history.push(message);
        }
        Ok(self.state())
    }

    fn fail(&self, step: u32, cause: &dyn fmt::Display) {
        let _ = self.transcript.append(Event::SessionFailed {
            step,
            cause: cause.to_string(),
        });
    }

    /// Runs exactly one inner-loop iteration.
    pub fn step(&mut self) -> Result<StepRecord, SessionError> {
        let state = self.state();
        if state.status != SessionStatus::Stepping || state.step_index >= state.max_steps {
            return Err(SessionError::InvalidState(state.status));
        }
        let step = state.step_index;

        let request = ModelRequest {
            messages: self.request_messages(),
            model_id: self.config.model_id.clone(),
            temperature: self.config.temperature,
            max_response_chars: self.config.max_response_chars,
        };
        let prompt_digest = request.digest();
        self.transcript.append(Event::ModelQueried {
            step,
            prompt_digest: prompt_digest.clone(),
            message_count: request.messages.len(),
        })?;

        let response = match self.backend.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                self.fail(step, &e);
                return Err(e.into());
            }
        };
        self.transcript.append(Event::ModelResponded {
            step,
            text: response.text.clone(),
            finish_reason: response.finish_reason.clone(),
            latency_ms: response.latency_ms,
            source: response.source.clone(),
        })?;

        let parsed = parser::parse_response(&response.text, &self.config.parser);
        self.transcript.append(Event::BlocksParsed {
            step,
            blocks: parsed
                .blocks
                .iter()
                .map(|(b, c)| BlockSummary {
                    ordinal: b.ordinal,
                    info_tag: b.info_tag.clone(),
                    span: (b.span.start, b.span.end),
                    class: c.clone(),
                })
                .collect(),
            human_input_requested: parsed.human_input_requested,
            terminal: parsed.terminal,
        })?;

        // Program code lands on disk before any command from this response runs.
        let staged = match snippets::stage(&parsed.blocks, &self.session_dir, step) {
            Ok(s) => s,
            Err(e) => {
                self.fail(step, &e);
                return Err(e.into());
            }
        };
        for snippet in &staged {
            self.transcript.append(Event::SnippetStaged {
                step,
                snippet: snippet.clone(),
            })?;
        }

        let requests: Vec<CommandRequest> = parsed
            .shell_blocks()
            .flat_map(|(block, shell)| {
                parser::split_commands(block, shell)
                    .into_iter()
                    .map(move |command| (command, shell.to_string()))
            })
            .enumerate()
            .map(|(ordinal, (command, shell_tag))| CommandRequest {
                command,
                shell_tag,
                working_dir: PathBuf::from("."),
                step,
                ordinal,
            })
            .collect();

        let mut listener = TranscriptListener {
            transcript: &self.transcript,
            step,
            error: None,
        };
        let executions = self.executor.execute_all(
            requests,
            &self.config.policy,
            self.approval.as_ref(),
            &mut listener,
        );
        if let Some(e) = listener.error {
            self.fail(step, &e);
            return Err(e.into());
        }

        let outcome = if parsed.human_input_requested {
            StepOutcome::Pause(PauseReason::MarkerRequested)
        } else if parsed.terminal {
            StepOutcome::Pause(PauseReason::NoActionableOutput)
        } else {
            StepOutcome::Continue
        };
        let next_prompt = if !executions.is_empty() {
            Some(prompt::render_step(&executions, &self.config.templates)?)
        } else if outcome == StepOutcome::Continue {
            Some(prompt::render_empty(&self.config.templates))
        } else {
            None
        };

        self.transcript.append(Event::StepCompleted {
            step,
            outcome,
            next_prompt: next_prompt.clone(),
        })?;
        self.history
            .push(ChatMessage::new(Role::Assistant, response.text.clone()));
        self.history.extend(next_prompt);

        if let StepOutcome::Pause(reason) = outcome {
            self.transcript.append(Event::Paused {
                reason,
                step_index: step + 1,
            })?;
        }

        Ok(StepRecord {
            step_index: step,
            prompt_digest,
            response,
            parsed,
            staged,
            executions,
            outcome,
        })
    }

    /// Steps until a pause, a failure, or the step bound. `step_budget`
    /// optionally caps the number of steps taken by this call; when it runs
    /// out the session is left in `Stepping`.
    pub fn run_until_pause(
        &mut self,
        step_budget: Option<u32>,
    ) -> Result<Vec<StepRecord>, SessionError> {
        let state = self.state();
        if state.status != SessionStatus::Stepping {
            return Err(SessionError::InvalidState(state.status));
        }
        let mut records = Vec::new();
        loop {
            let state = self.state();
            if state.status != SessionStatus::Stepping {
                break;
            }
            if self.stop.swap(false, Ordering::SeqCst) {
                self.transcript.append(Event::Paused {
                    reason: PauseReason::Interrupted,
                    step_index: state.step_index,
                })?;
                break;
            }
            if state.step_index >= state.max_steps {
                self.transcript.append(Event::Paused {
                    reason: PauseReason::MaxStepsReached,
                    step_index: state.step_index,
                })?;
                break;
            }
            if step_budget.is_some_and(|b| records.len() as u32 >= b) {
                break;
            }
            let record = self.step()?;
            let paused = matches!(record.outcome, StepOutcome::Pause(_));
            records.push(record);
            if paused {
                break;
            }
        }
        Ok(records)
    }

    pub fn close(&mut self) -> Result<(), SessionError> {
        self.transcript.append(Event::SessionClosed {})?;
        Ok(())
    }
}
