//! Prompt rendering: initial instructions, per-step command output, the
//! empty template used when nothing ran, and human resume messages.
//!
//! Templates are plain text with `{{name}}` slots. Defaults are compiled in
//! and any of them can be overridden by a file of the same name in a
//! templates directory.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use regex::{Captures, Regex};
use std::sync::OnceLock;
use thiserror::Error;

use crate::executor::{ExecutionRecord, Verdict};
use crate::gateway::{ChatMessage, Role};

pub const DEFAULT_SYSTEM: &str = include_str!("../templates/system.txt");
pub const DEFAULT_OUTPUT: &str = include_str!("../templates/output.txt");
pub const DEFAULT_RECORD: &str = include_str!("../templates/record.txt");
pub const DEFAULT_EMPTY: &str = include_str!("../templates/empty.txt");

pub const DEFAULT_TRUNCATION_BUDGET: usize = 12_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template variable {0:?} has no value")]
    MissingTemplateVariable(String),
    #[error("input is blank")]
    BlankInput,
    #[error("no execution records to render")]
    NoRecords,
    #[error("cannot read template {path}: {cause}")]
    TemplateRead { path: String, cause: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    pub system_instructions: String,
    pub output_template: String,
    pub record_template: String,
    pub empty_template: String,
    /// Characters available to captured stream content in one step prompt.
    pub truncation_budget: usize,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self {
            system_instructions: DEFAULT_SYSTEM.to_string(),
            output_template: DEFAULT_OUTPUT.to_string(),
            record_template: DEFAULT_RECORD.to_string(),
            empty_template: DEFAULT_EMPTY.to_string(),
            truncation_budget: DEFAULT_TRUNCATION_BUDGET,
        }
    }
}

impl PromptTemplateSet {
    /// Loads `system.txt`, `output.txt`, `record.txt` and `empty.txt` from
    /// `dir`, keeping the built-in default for any file that is missing.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        let slots = [
            ("system.txt", &mut set.system_instructions),
            ("output.txt", &mut set.output_template),
            ("record.txt", &mut set.record_template),
            ("empty.txt", &mut set.empty_template),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(PromptError::TemplateRead {
                        path: path.display().to_string(),
                        cause: e.to_string(),
                    })
                }
            }
        }
        Ok(set)
    }
}

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z0-9_]+)\s*\}\}").unwrap())
}

/// Substitutes every `{{name}}` slot from `vars`.
pub fn substitute(template: &str, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
    if let Some(missing) = slot_regex()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .find(|name| !vars.contains_key(name))
    {
        return Err(PromptError::MissingTemplateVariable(missing));
    }
    Ok(slot_regex()
        .replace_all(template, |c: &Captures| vars[&c[1]].clone())
        .into_owned())
}

pub fn render_initial(
    task: &str,
    templates: &PromptTemplateSet,
    env_facts: &BTreeMap<String, String>,
) -> Result<Vec<ChatMessage>, PromptError> {
    if task.trim().is_empty() {
        return Err(PromptError::BlankInput);
    }
    Ok(vec![
        ChatMessage::new(Role::System, render_system(templates, env_facts)?),
        ChatMessage::new(Role::User, task),
    ])
}

pub fn render_system(
    templates: &PromptTemplateSet,
    env_facts: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    substitute(&templates.system_instructions, env_facts)
}

pub fn render_resume(human_input: &str) -> Result<ChatMessage, PromptError> {
    if human_input.trim().is_empty() {
        return Err(PromptError::BlankInput);
    }
    Ok(ChatMessage::new(Role::User, human_input))
}

pub fn render_empty(templates: &PromptTemplateSet) -> ChatMessage {
    ChatMessage::new(Role::User, templates.empty_template.clone())
}

pub fn elision_marker(elided_bytes: usize) -> String {
    format!("…[truncated {elided_bytes} bytes]…")
}

/// Splits `budget` characters across streams of the given lengths so that
/// short streams keep everything and long ones share the rest evenly.
pub fn allocate(lengths: &[usize], budget: usize) -> Vec<usize> {
    if lengths.iter().sum::<usize>() <= budget {
        return lengths.to_vec();
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut alloc = vec![0; lengths.len()];
    let mut remaining = budget;
    for (pos, &i) in order.iter().enumerate() {
        let left = order.len() - pos;
        let share = remaining / left;
        if lengths[i] <= share {
            alloc[i] = lengths[i];
            remaining -= lengths[i];
        } else {
            let extra = remaining % left;
            for (k, &j) in order[pos..].iter().enumerate() {
                alloc[j] = share + usize::from(k < extra);
            }
            break;
        }
    }
    alloc
}

/// Truncates `text` to at most `allowance` characters, keeping head and tail
/// around an elision marker.
pub fn elide(text: &str, allowance: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= allowance {
        return text.to_string();
    }
    let marker_upper = elision_marker(text.len()).chars().count();
    if allowance < marker_upper {
        return chars[..allowance].iter().collect();
    }
    let keep = allowance - marker_upper;
    let head_n = keep / 2;
    let tail_n = keep - head_n;
    let head: String = chars[..head_n].iter().collect();
    let tail: String = chars[chars.len() - tail_n..].iter().collect();
    let elided = text.len() - head.len() - tail.len();
    format!("{head}{}{tail}", elision_marker(elided))
}

fn verdict_label(verdict: &Verdict) -> String {
    match verdict {
        Verdict::Ran => "ran".into(),
        Verdict::Denied { rule } => format!("denied by policy rule {rule}"),
        Verdict::NeedsApprovalTimedOut => "approval timed out, not run".into(),
        Verdict::TimedOut => "timed out and killed".into(),
        Verdict::SpawnFailed { cause } => format!("failed to start: {cause}"),
    }
}

pub fn render_step(
    records: &[ExecutionRecord],
    templates: &PromptTemplateSet,
) -> Result<ChatMessage, PromptError> {
    if records.is_empty() {
        return Err(PromptError::NoRecords);
    }
    let lengths: Vec<usize> = records
        .iter()
        .flat_map(|r| [r.stdout.chars().count(), r.stderr.chars().count()])
        .collect();
    let alloc = allocate(&lengths, templates.truncation_budget);

    let mut rendered = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let mut stdout = elide(&record.stdout, alloc[2 * i]);
        let mut stderr = elide(&record.stderr, alloc[2 * i + 1]);
        if record.stdout_truncated {
            stdout.push_str("\n…[output capped by executor]");
        }
        if record.stderr_truncated {
            stderr.push_str("\n…[output capped by executor]");
        }
        let vars: BTreeMap<String, String> = [
            ("command", record.request.command.clone()),
            ("shell", record.request.shell_tag.clone()),
            ("verdict", verdict_label(&record.verdict)),
            (
                "exit_status",
                record
                    .exit_status
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            ("stdout", stdout),
            ("stderr", stderr),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        rendered.push(substitute(&templates.record_template, &vars)?);
    }
    let mut vars = BTreeMap::new();
    vars.insert("records".to_string(), rendered.join("\n"));
    Ok(ChatMessage::new(
        Role::User,
        substitute(&templates.output_template, &vars)?,
    ))
}

/// Facts substituted into the system template.
pub fn env_facts(
    session_dir: &Path,
    parser: &crate::parser::ParserConfig,
) -> BTreeMap<String, String> {
    let tags_of = |kind| {
        parser
            .tags
            .iter()
            .filter(|(_, k)| **k == kind)
            .map(|(t, _)| t.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut facts = BTreeMap::new();
    facts.insert("os".into(), std::env::consts::OS.to_string());
    facts.insert("session_dir".into(), session_dir.display().to_string());
    facts.insert(
        "snippet_path".into(),
        crate::snippets::latest_relative_path("python").display().to_string(),
    );
    facts.insert("shell_tags".into(), tags_of(crate::parser::TagKind::Shell));
    facts.insert("program_tags".into(), tags_of(crate::parser::TagKind::Program));
    facts.insert("pause_marker".into(), parser.pause_marker.clone());
    facts
}
