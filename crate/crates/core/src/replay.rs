//! Deterministic re-execution of a recorded session.
//!
//! The model responses, human inputs and approval decisions are lifted out of
//! a transcript and fed back through a fresh session; the two transcripts
//! must then hash identically.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::executor::{ApprovalDecision, ScriptedApproval};
use crate::gateway::ScriptedModel;
use crate::session::{Session, SessionConfig, SessionError, SessionState, SessionStatus};
use crate::transcript::{self, content_hash, Event, TranscriptError, TranscriptEvent};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("transcript has no task to replay")]
    NoTask,
}

/// Inputs lifted from a transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayPlan {
    pub max_steps: u32,
    pub inputs: Vec<String>,
    pub responses: Vec<String>,
    pub approvals: Vec<ApprovalDecision>,
    pub closed: bool,
}

impl ReplayPlan {
    pub fn from_events(events: &[TranscriptEvent]) -> Result<Self, ReplayError> {
        let mut plan = ReplayPlan {
            max_steps: 1,
            inputs: Vec::new(),
            responses: Vec::new(),
            approvals: Vec::new(),
            closed: false,
        };
        for record in events {
            match &record.event {
                Event::SessionOpened { max_steps, .. } => plan.max_steps = *max_steps,
                Event::TaskSubmitted { task } => plan.inputs.push(task.clone()),
                Event::Resumed { input, .. } => plan.inputs.push(input.clone()),
                Event::ModelResponded { text, .. } => plan.responses.push(text.clone()),
                Event::ApprovalResolved { decision, .. } => plan.approvals.push(*decision),
                Event::SessionClosed {} => plan.closed = true,
                _ => {}
            }
        }
        if plan.inputs.is_empty() {
            return Err(ReplayError::NoTask);
        }
        Ok(plan)
    }
}

/// Submits `inputs` one at a time, running to the next pause after each.
///
/// Gateway and storage failures are already recorded in the transcript as
/// `SessionFailed`, so they end a run without aborting the drive; the next
/// input resumes the failed session.
pub fn drive<'a>(
    session: &mut Session,
    inputs: impl IntoIterator<Item = &'a str>,
    mut before_input: impl FnMut(usize, &Session),
) -> Result<SessionState, SessionError> {
    for (i, input) in inputs.into_iter().enumerate() {
        if !session.state().status.accepts_input() {
            break;
        }
        before_input(i, session);
        session.submit_task(input)?;
        match session.run_until_pause(None) {
            Ok(_) => {}
            Err(SessionError::Gateway(_)) | Err(SessionError::Storage(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(session.state())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub original_hash: String,
    pub replay_hash: String,
    pub final_state: SessionState,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.original_hash == self.replay_hash
    }
}

/// Replays the transcript at `original` into the empty directory `work_dir`.
pub fn replay_transcript(
    original: &Path,
    work_dir: &Path,
    mut config: SessionConfig,
) -> Result<ReplayOutcome, ReplayError> {
    let loaded = transcript::load(original)?;
    if let Some(e) = loaded.corruption {
        return Err(e.into());
    }
    let plan = ReplayPlan::from_events(&loaded.events)?;
    config.max_steps = plan.max_steps;

    let mut session = Session::create(
        work_dir,
        config,
        Box::new(ScriptedModel::from_responses(plan.responses.clone())),
        Arc::new(ScriptedApproval::new(plan.approvals.clone())),
    )?;
    drive(&mut session, plan.inputs.iter().map(String::as_str), |_, _| {})?;
    if plan.closed && session.state().status != SessionStatus::Closed {
        session.close()?;
    }
    Ok(ReplayOutcome {
        original_hash: content_hash(&loaded.events),
        replay_hash: session.transcript().content_hash(),
        final_state: session.state(),
    })
}
