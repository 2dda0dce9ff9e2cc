//! Self-checking replay scenarios.
//!
//! A scenario bundles seed files, a scripted model, the human inputs that
//! drive it, optional stub web routes and machine-checkable assertions about
//! the tools the agent leaves behind. Scenario files use the same `[[entry]]`
//! tables as model scripts.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{Bm25, Bm25Params};
use crate::executor::{
    ApprovalDecision, CommandRequest, Executor, FixedApproval, NoopListener, ScriptedApproval,
    Verdict,
};
use crate::gateway::{ScriptParseError, ScriptedModel};
use crate::parser::ParserConfig;
use crate::policy::{Policy, PolicyError, PolicySpec};
use crate::replay::drive;
use crate::session::{
    PauseReason, Session, SessionConfig, SessionError, SessionState, SessionStatus, StepOutcome,
};
use crate::stub::{StubRoute, StubWebService};
use crate::transcript::{Event, TranscriptEvent};

/// Environment variable carrying the stub service base URL to commands.
pub const STUB_URL_ENV: &str = "STUB_URL";
/// Deny rule added to every scenario policy: no literal URLs in commands.
pub const HERMETIC_DENY_RULE: &str = r"re:(?i)\b(https?|ftp)://";

pub const BUILTIN: &[(&str, &str)] = &[
    ("case1", include_str!("../../../scenarios/case1.toml")),
    ("case2", include_str!("../../../scenarios/case2.toml")),
    ("case3", include_str!("../../../scenarios/case3.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error("invalid scenario {name}: {cause}")]
    Invalid { name: String, cause: String },
    #[error(transparent)]
    Script(#[from] ScriptParseError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("scenario infrastructure failure: {0}")]
    Infrastructure(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFile {
    pub path: PathBuf,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanInput {
    pub text: String,
    /// Files the human creates before sending this input.
    #[serde(default)]
    pub files: Vec<SeedFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioAssertion {
    FileExists {
        path: PathBuf,
    },
    FileContains {
        path: PathBuf,
        substring: String,
    },
    FileEquals {
        path: PathBuf,
        content: String,
    },
    CommandOutputEquals {
        command: String,
        expected: String,
    },
    SessionEndedIn {
        status: String,
        #[serde(default)]
        reason: Option<PauseReason>,
    },
    /// First integer on each output line is a document id (1-based line of
    /// `corpus`). Without `expected`, the BM25 reference ranking of `query`
    /// over the corpus is used.
    RankingEquals {
        command: String,
        #[serde(default)]
        expected: Option<Vec<usize>>,
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default)]
        query: Option<String>,
    },
    /// Output lines, as a set, equal the `href` values in a stub route body.
    OutputEqualsRouteHrefs {
        command: String,
        route: String,
    },
    /// Output lines equal lines `start..=end` of a stub route's visible text.
    OutputEqualsRouteLines {
        command: String,
        route: String,
        start: usize,
        end: usize,
    },
    PauseCount {
        reason: PauseReason,
        count: usize,
    },
}

impl ScenarioAssertion {
    pub fn describe(&self) -> String {
        match self {
            Self::FileExists { path } => format!("file exists: {}", path.display()),
            Self::FileContains { path, substring } => {
                format!("file {} contains {substring:?}", path.display())
            }
            Self::FileEquals { path, .. } => format!("file {} equals fixture", path.display()),
            Self::CommandOutputEquals { command, .. } => format!("output of `{command}` equals fixture"),
            Self::SessionEndedIn { status, reason } => match reason {
                Some(r) => format!("session ended in {status} ({r:?})"),
                None => format!("session ended in {status}"),
            },
            Self::RankingEquals { command, .. } => format!("ranking from `{command}` equals reference"),
            Self::OutputEqualsRouteHrefs { command, route } => {
                format!("links from `{command}` equal hrefs of {route}")
            }
            Self::OutputEqualsRouteLines { command, route, start, end } => {
                format!("lines from `{command}` equal lines {start}..={end} of {route}")
            }
            Self::PauseCount { reason, count } => format!("{count} pause(s) with {reason:?}"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default = "default_max_steps")]
    max_steps: u32,
    #[serde(default)]
    policy: Option<PolicySpec>,
    #[serde(default)]
    approvals: Vec<ApprovalDecision>,
    #[serde(default)]
    files: Vec<SeedFile>,
    inputs: Vec<HumanInput>,
    #[serde(default)]
    routes: Vec<StubRoute>,
    #[serde(default)]
    assertions: Vec<ScenarioAssertion>,
    /// Script entries; parsed separately by `ScriptedModel::parse`.
    #[serde(default, rename = "entry")]
    _entry: Vec<toml::Value>,
}

fn default_max_steps() -> u32 {
    20
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub max_steps: u32,
    pub policy: PolicySpec,
    pub approvals: Vec<ApprovalDecision>,
    pub initial_files: Vec<SeedFile>,
    pub inputs: Vec<HumanInput>,
    pub stub_routes: Vec<StubRoute>,
    pub assertions: Vec<ScenarioAssertion>,
    pub script: ScriptedModel,
}

fn check_relative(name: &str, path: &Path) -> Result<(), ScenarioError> {
    let ok = path
        .components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::Invalid {
            name: name.to_string(),
            cause: format!("path {} must stay inside the session directory", path.display()),
        })
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Invalid {
            name: "<unparsed>".into(),
            cause: e.to_string(),
        })?;
        let script = ScriptedModel::parse(text)?;
        let mut policy = file.policy.unwrap_or_default();
        if !policy.deny.iter().any(|r| r == HERMETIC_DENY_RULE) {
            policy.deny.insert(0, HERMETIC_DENY_RULE.to_string());
        }
        policy.compile()?;
        if file.inputs.is_empty() {
            return Err(ScenarioError::Invalid {
                name: file.name,
                cause: "at least one input is required".into(),
            });
        }
        for seed in file.files.iter().chain(file.inputs.iter().flat_map(|i| &i.files)) {
            check_relative(&file.name, &seed.path)?;
        }
        Ok(Self {
            name: file.name,
            description: file.description,
            max_steps: file.max_steps.max(1),
            policy,
            approvals: file.approvals,
            initial_files: file.files,
            inputs: file.inputs,
            stub_routes: file.routes,
            assertions: file.assertions,
            script,
        })
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text))
            .unwrap_or_else(|| Err(ScenarioError::Unknown(name.to_string())))
    }

    /// A built-in name, or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        let path = Path::new(name_or_path);
        if path.is_file() {
            let text = fs::read_to_string(path)
                .map_err(|e| ScenarioError::Infrastructure(e.to_string()))?;
            return Self::parse(&text);
        }
        Self::builtin(name_or_path)
    }

    pub fn seed(&self, session_dir: &Path) -> Result<(), ScenarioError> {
        write_files(session_dir, &self.initial_files)
    }

    pub fn start_stub(&self) -> Result<Option<StubWebService>, ScenarioError> {
        if self.stub_routes.is_empty() {
            return Ok(None);
        }
        StubWebService::start(self.stub_routes.clone())
            .map(Some)
            .map_err(|e| ScenarioError::Infrastructure(format!("stub service: {e}")))
    }

    pub fn command_env(stub: Option<&StubWebService>) -> Vec<(String, String)> {
        let mut env = vec![
            ("NO_PROXY".to_string(), "127.0.0.1,localhost".to_string()),
            ("no_proxy".to_string(), "127.0.0.1,localhost".to_string()),
        ];
        if let Some(stub) = stub {
            env.push((STUB_URL_ENV.to_string(), stub.base_url()));
        }
        env
    }

    pub fn session_config(
        &self,
        parser: ParserConfig,
        stub: Option<&StubWebService>,
    ) -> Result<SessionConfig, ScenarioError> {
        Ok(SessionConfig {
            max_steps: self.max_steps,
            parser,
            policy: self.policy.compile()?,
            command_env: Self::command_env(stub),
            ..SessionConfig::default()
        })
    }

    /// Seeds `session_dir` and opens a session wired to this scenario's script.
    pub fn open_session(
        &self,
        session_dir: &Path,
        parser: ParserConfig,
        stub: Option<&StubWebService>,
    ) -> Result<Session, ScenarioError> {
        fs::create_dir_all(session_dir)
            .map_err(|e| ScenarioError::Infrastructure(format!("{}: {e}", session_dir.display())))?;
        self.seed(session_dir)?;
        Ok(Session::create_with_id(
            session_dir,
            format!("scenario-{}", self.name),
            self.session_config(parser, stub)?,
            Box::new(self.script.clone()),
            Arc::new(ScriptedApproval::new(self.approvals.clone())),
        )?)
    }
}

fn write_files(root: &Path, files: &[SeedFile]) -> Result<(), ScenarioError> {
    for seed in files {
        let path = root.join(&seed.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| ScenarioError::Infrastructure(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, &seed.content)
            .map_err(|e| ScenarioError::Infrastructure(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub assertions: Vec<AssertionResult>,
    pub transcript_hash: String,
    pub final_state: SessionState,
    pub steps: usize,
    pub outcomes: BTreeSet<String>,
    pub elapsed_ms: u128,
    pub session_dir: PathBuf,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Runs `scenario` in `session_dir` (created if needed; must hold no transcript).
pub fn run_scenario(scenario: &Scenario, session_dir: &Path) -> Result<ScenarioReport, ScenarioError> {
    run_scenario_with(scenario, session_dir, ParserConfig::default())
}

pub fn run_scenario_with(
    scenario: &Scenario,
    session_dir: &Path,
    parser: ParserConfig,
) -> Result<ScenarioReport, ScenarioError> {
    let started = Instant::now();
    let stub = scenario.start_stub()?;
    let mut session = scenario.open_session(session_dir, parser, stub.as_ref())?;

    let mut seed_error = None;
    drive(
        &mut session,
        scenario.inputs.iter().map(|i| i.text.as_str()),
        |i, s| {
            if let Err(e) = write_files(s.session_dir(), &scenario.inputs[i].files) {
                seed_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = seed_error {
        return Err(e);
    }

    let events = session.transcript().events();
    let final_state = session.state();
    let checker = Checker {
        session_dir,
        stub_routes: &scenario.stub_routes,
        policy: &scenario.policy,
        env: Scenario::command_env(stub.as_ref()),
        events: &events,
        final_state: &final_state,
    };
    let assertions = scenario
        .assertions
        .iter()
        .map(|a| {
            let (passed, detail) = checker.check(a);
            AssertionResult {
                description: a.describe(),
                passed,
                detail,
            }
        })
        .collect();

    Ok(ScenarioReport {
        name: scenario.name.clone(),
        assertions,
        transcript_hash: session.transcript().content_hash(),
        final_state,
        steps: events
            .iter()
            .filter(|e| matches!(e.event, Event::StepCompleted { .. }))
            .count(),
        outcomes: outcome_classes(&events),
        elapsed_ms: started.elapsed().as_millis(),
        session_dir: session_dir.to_path_buf(),
    })
}

/// Names of the step outcomes seen: `continue`, or a pause reason.
pub fn outcome_classes(events: &[TranscriptEvent]) -> BTreeSet<String> {
    events
        .iter()
        .filter_map(|e| match &e.event {
            Event::StepCompleted { outcome, .. } => Some(match outcome {
                StepOutcome::Continue => "continue".to_string(),
                StepOutcome::Pause(r) => format!("{r:?}"),
            }),
            _ => None,
        })
        .collect()
}

fn href_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?is)<a\s[^>]*?href\s*=\s*"([^"]*)""#).unwrap())
}

/// `href` attribute values of anchor tags in `html`.
pub fn extract_hrefs(html: &str) -> BTreeSet<String> {
    href_regex()
        .captures_iter(html)
        .map(|c| c[1].to_string())
        .filter(|h| !h.is_empty())
        .collect()
}

/// Visible text of `html`, one trimmed non-empty line per entry.
pub fn visible_lines(html: &str) -> Vec<String> {
    static SKIP: OnceLock<Regex> = OnceLock::new();
    static TAG: OnceLock<Regex> = OnceLock::new();
    let skip = SKIP.get_or_init(|| Regex::new(r"(?is)<(script|style)\b.*?</(script|style)\s*>").unwrap());
    let tag = TAG.get_or_init(|| Regex::new(r"(?s)<[^>]*>").unwrap());
    let text = skip.replace_all(html, "");
    let text = tag.replace_all(&text, "");
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

struct Checker<'a> {
    session_dir: &'a Path,
    stub_routes: &'a [StubRoute],
    policy: &'a PolicySpec,
    env: Vec<(String, String)>,
    events: &'a [TranscriptEvent],
    final_state: &'a SessionState,
}

impl Checker<'_> {
    fn run(&self, command: &str) -> Result<String, String> {
        let policy = Policy::new(self.policy.clone()).map_err(|e| e.to_string())?;
        let executor = Executor::new(self.session_dir).with_env(self.env.clone());
        let record = executor.execute(
            CommandRequest {
                command: command.to_string(),
                shell_tag: "sh".into(),
                working_dir: PathBuf::from("."),
                step: u32::MAX,
                ordinal: 0,
            },
            &policy,
            &FixedApproval(ApprovalDecision::Approve),
            &mut NoopListener,
        );
        match (&record.verdict, record.exit_status) {
            (Verdict::Ran, Some(0)) => Ok(record.stdout),
            _ => Err(format!(
                "{:?} exit {:?}: {}",
                record.verdict,
                record.exit_status,
                record.stderr.trim()
            )),
        }
    }

    fn route(&self, path: &str) -> Result<&StubRoute, String> {
        self.stub_routes
            .iter()
            .find(|r| r.path == path)
            .ok_or_else(|| format!("no stub route {path}"))
    }

    fn read(&self, path: &Path) -> Result<String, String> {
        fs::read_to_string(self.session_dir.join(path)).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn check(&self, assertion: &ScenarioAssertion) -> (bool, String) {
        match self.evaluate(assertion) {
            Ok(()) => (true, String::new()),
            Err(detail) => (false, detail),
        }
    }

    fn evaluate(&self, assertion: &ScenarioAssertion) -> Result<(), String> {
        let compare = |got: &dyn std::fmt::Debug, want: &dyn std::fmt::Debug, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(format!("expected {want:?}, got {got:?}"))
            }
        };
        match assertion {
            ScenarioAssertion::FileExists { path } => {
                if self.session_dir.join(path).is_file() {
                    Ok(())
                } else {
                    Err(format!("{} missing", path.display()))
                }
            }
            ScenarioAssertion::FileContains { path, substring } => {
                let text = self.read(path)?;
                compare(&text, substring, text.contains(substring.as_str()))
            }
            ScenarioAssertion::FileEquals { path, content } => {
                let text = self.read(path)?;
                compare(&text, content, &text == content)
            }
            ScenarioAssertion::CommandOutputEquals { command, expected } => {
                let out = self.run(command)?;
                compare(&out, expected, &out == expected)
            }
            ScenarioAssertion::SessionEndedIn { status, reason } => {
                let got = &self.final_state.status;
                let reason_ok = match (reason, got) {
                    (None, _) => true,
                    (Some(want), SessionStatus::AwaitingHuman { reason }) => want == reason,
                    (Some(_), _) => false,
                };
                compare(got, &(status, reason), got.name() == status && reason_ok)
            }
            ScenarioAssertion::RankingEquals {
                command,
                expected,
                corpus,
                query,
            } => {
                let want = match (expected, corpus, query) {
                    (Some(ids), _, _) => ids.clone(),
                    (None, Some(corpus), Some(query)) => {
                        let text = self.read(corpus)?;
                        let docs: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
                        Bm25::<f64>::new(&docs, Bm25Params::default())
                            .rank(query)
                            .into_iter()
                            .map(|(i, _)| i + 1)
                            .collect()
                    }
                    _ => return Err("ranking needs `expected` or `corpus` and `query`".into()),
                };
                let out = self.run(command)?;
                let got: Vec<usize> = out
                    .lines()
                    .filter_map(|l| l.split_whitespace().next()?.parse().ok())
                    .collect();
                compare(&got, &want, got == want)
            }
            ScenarioAssertion::OutputEqualsRouteHrefs { command, route } => {
                let want = extract_hrefs(&self.route(route)?.body);
                let out = self.run(command)?;
                let got: BTreeSet<String> = out
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect();
                compare(&got, &want, !want.is_empty() && got == want)
            }
            ScenarioAssertion::OutputEqualsRouteLines {
                command,
                route,
                start,
                end,
            } => {
                let lines = visible_lines(&self.route(route)?.body);
                if *start == 0 || start > end || *end > lines.len() {
                    return Err(format!("range {start}..={end} outside 1..={}", lines.len()));
                }
                let want = lines[start - 1..*end].to_vec();
                let out = self.run(command)?;
                let got: Vec<String> = out.lines().map(|l| l.trim().to_string()).collect();
                compare(&got, &want, got == want)
            }
            ScenarioAssertion::PauseCount { reason, count } => {
                let got = self
                    .events
                    .iter()
                    .filter(|e| matches!(&e.event, Event::Paused { reason: r, .. } if r == reason))
                    .count();
                compare(&got, count, got == *count)
            }
        }
    }
}

/// Per-name counts of pause reasons in a transcript.
pub fn pause_counts(events: &[TranscriptEvent]) -> HashMap<PauseReason, usize> {
    let mut counts = HashMap::new();
    for e in events {
        if let Event::Paused { reason, .. } = &e.event {
            *counts.entry(*reason).or_default() += 1;
        }
    }
    counts
}
