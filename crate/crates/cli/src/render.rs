//! One-line-ish operator summaries of transcript events.

use forgeloop::executor::Verdict;
use forgeloop::session::StepOutcome;
use forgeloop::transcript::Event;

const OUTPUT_PREVIEW_LINES: usize = 20;

fn indent(text: &str, prefix: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let mut out: Vec<String> = lines
        .iter()
        .take(OUTPUT_PREVIEW_LINES)
        .map(|l| format!("{prefix}{l}"))
        .collect();
    if lines.len() > OUTPUT_PREVIEW_LINES {
        out.push(format!("{prefix}... ({} more lines)", lines.len() - OUTPUT_PREVIEW_LINES));
    }
    out.join("\n")
}

pub fn describe(event: &Event) -> Option<String> {
    Some(match event {
        Event::SessionOpened { session_id, max_steps } => {
            format!("session {session_id} opened (max {max_steps} steps)")
        }
        Event::ModelResponded { step, text, .. } => {
            format!("[step {step}] model:\n{}", indent(text.trim_end(), "  | "))
        }
        Event::SnippetStaged { snippet, .. } => format!(
            "  staged {} ({})",
            snippet.latest_path.display(),
            snippet.archive_path.display()
        ),
        Event::CommandStarted { command, .. } => format!("  $ {command}"),
        Event::CommandFinished { record, .. } => {
            let head = match &record.verdict {
                Verdict::Ran => format!("    exit {}", record.exit_status.map_or("?".into(), |c| c.to_string())),
                Verdict::Denied { rule } => format!("    denied by rule {rule}"),
                Verdict::NeedsApprovalTimedOut => "    approval timed out".into(),
                Verdict::TimedOut => format!("    timed out after {} ms", record.duration_ms),
                Verdict::SpawnFailed { cause } => format!("    spawn failed: {cause}"),
            };
            let mut out = vec![head];
            if !record.stdout.is_empty() {
                out.push(indent(record.stdout.trim_end(), "    > "));
            }
            if !record.stderr.is_empty() {
                out.push(indent(record.stderr.trim_end(), "    ! "));
            }
            out.join("\n")
        }
        Event::StepCompleted { step, outcome: StepOutcome::Continue, .. } => format!("[step {step}] done"),
        Event::Paused { reason, step_index } => format!("paused after {step_index} steps: {reason:?}"),
        Event::SessionFailed { step, cause } => format!("[step {step}] failed: {cause}"),
        Event::SessionClosed {} => "session closed".into(),
        _ => return None,
    })
}
