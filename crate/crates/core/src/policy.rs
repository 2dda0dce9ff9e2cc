//! Command policy: deny rules, then allow rules, then the mode fallback.
//!
//! Rule patterns are globs by default (`*` any run, `?` one char) matched
//! against the whole trimmed command. A `re:` prefix switches to a regular
//! expression, which is searched anywhere in the command.

use std::path::{Component, Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MAX_OUTPUT_BYTES: usize = 16_384;
pub const CONFINEMENT_RULE: &str = "confine_working_dir";
pub const DEFAULT_RULE: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    AutoRun,
    ApproveAll,
    RulesOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("malformed policy rule {pattern:?}: {cause}")]
    MalformedRule { pattern: String, cause: String },
    #[error("invalid policy file: {0}")]
    Parse(String),
}

/// On-disk policy file. Key names are fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub mode: PolicyMode,
    pub deny: Vec<String>,
    pub allow: Vec<String>,
    pub timeout_ms: u64,
    pub max_output_bytes: usize,
    pub confine_working_dir: bool,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            mode: PolicyMode::AutoRun,
            deny: Vec::new(),
            allow: Vec::new(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
            confine_working_dir: true,
        }
    }
}

impl PolicySpec {
    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        toml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))
    }

    pub fn compile(&self) -> Result<Policy, PolicyError> {
        Policy::new(self.clone())
    }
}

#[derive(Debug, Clone)]
struct Rule {
    id: String,
    regex: Regex,
}

impl Rule {
    fn compile(pattern: &str) -> Result<Self, PolicyError> {
        let malformed = |cause: String| PolicyError::MalformedRule {
            pattern: pattern.to_string(),
            cause,
        };
        let source = match pattern.strip_prefix("re:") {
            Some(re) => re.to_string(),
            None => {
                if pattern.trim().is_empty() {
                    return Err(malformed("empty pattern".into()));
                }
                glob_to_regex(pattern.trim())
            }
        };
        let regex = Regex::new(&source).map_err(|e| malformed(e.to_string()))?;
        Ok(Self {
            id: pattern.to_string(),
            regex,
        })
    }

    fn matches(&self, command: &str) -> bool {
        self.regex.is_match(command)
    }
}

fn glob_to_regex(glob: &str) -> String {
    let mut out = String::from("(?s)^");
    for ch in glob.chars() {
        match ch {
            '*' => out.push_str(".*"),
            '?' => out.push('.'),
            c => out.push_str(&regex::escape(&c.to_string())),
        }
    }
    out.push('$');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "rule", rename_all = "snake_case")]
pub enum PolicyDecision {
    Allow,
    Deny(String),
    NeedsApproval,
}

/// A compiled, validated policy.
#[derive(Debug, Clone)]
pub struct Policy {
    spec: PolicySpec,
    deny: Vec<Rule>,
    allow: Vec<Rule>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy::new(PolicySpec::default()).expect("default policy has no rules")
    }
}

impl Policy {
    pub fn new(spec: PolicySpec) -> Result<Self, PolicyError> {
        let deny = spec
            .deny
            .iter()
            .map(|p| Rule::compile(p))
            .collect::<Result<_, _>>()?;
        let allow = spec
            .allow
            .iter()
            .map(|p| Rule::compile(p))
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, deny, allow })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn mode(&self) -> PolicyMode {
        self.spec.mode
    }

    pub fn timeout_ms(&self) -> u64 {
        self.spec.timeout_ms
    }

    pub fn max_output_bytes(&self) -> usize {
        self.spec.max_output_bytes
    }

    pub fn evaluate(&self, command: &str) -> PolicyDecision {
        let command = command.trim();
        if let Some(rule) = self.deny.iter().find(|r| r.matches(command)) {
            return PolicyDecision::Deny(rule.id.clone());
        }
        if self.allow.iter().any(|r| r.matches(command)) {
            return PolicyDecision::Allow;
        }
        match self.spec.mode {
            PolicyMode::AutoRun => PolicyDecision::Allow,
            PolicyMode::ApproveAll => PolicyDecision::NeedsApproval,
            PolicyMode::RulesOnly => PolicyDecision::Deny(DEFAULT_RULE.to_string()),
        }
    }

    /// Policy decision including the working-directory confinement check.
    pub fn evaluate_in(&self, command: &str, working_dir: &Path, session_dir: &Path) -> PolicyDecision {
        if self.spec.confine_working_dir && escapes_session(command, working_dir, session_dir) {
            return PolicyDecision::Deny(CONFINEMENT_RULE.to_string());
        }
        self.evaluate(command)
    }
}

pub fn evaluate_policy(command: &str, policy: &Policy) -> PolicyDecision {
    policy.evaluate(command)
}

fn lexical_join(base: &Path, rel: &Path) -> PathBuf {
    let mut out = if rel.is_absolute() {
        PathBuf::new()
    } else {
        base.to_path_buf()
    };
    for comp in rel.components() {
        match comp {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Best-effort check for commands that move out of the session directory:
/// a working directory outside it, or a `cd`/`pushd`/`chdir` whose target
/// resolves outside it. Shell expansion is not modelled.
pub fn escapes_session(command: &str, working_dir: &Path, session_dir: &Path) -> bool {
    let session = lexical_join(Path::new("/"), session_dir);
    let cwd = lexical_join(&session, working_dir);
    if !cwd.starts_with(&session) {
        return true;
    }
    for segment in command.split(['&', ';', '|']) {
        let mut words = segment.split_whitespace();
        let Some(head) = words.next() else { continue };
        if !matches!(head.to_ascii_lowercase().as_str(), "cd" | "pushd" | "chdir") {
            continue;
        }
        let target = words
            .find(|w| !w.eq_ignore_ascii_case("/d"))
            .map(|w| w.trim_matches('"'));
        match target {
            None => return true, // bare `cd` goes home
            Some(t) if t.starts_with('~') || t.starts_with('$') || t.starts_with('%') => return true,
            Some(t) => {
                let t = t.replace('\\', "/");
                let has_drive = t.len() >= 2 && t.as_bytes()[1] == b':';
                if has_drive || !lexical_join(&cwd, Path::new(&t)).starts_with(&session) {
                    return true;
                }
            }
        }
    }
    false
}
