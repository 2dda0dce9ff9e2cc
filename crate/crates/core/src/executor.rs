//! Sequential execution of terminal commands under a [`Policy`].
//!
//! Every outcome, including denial, timeout and spawn failure, comes back as
//! an [`ExecutionRecord`]; a non-zero exit status is data for the model, not
//! an error.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::policy::{Policy, PolicyDecision};
use crate::snippets::write_atomic;

/// Rule id recorded when an operator declines an approval.
pub const OPERATOR_RULE: &str = "operator";

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const READER_GRACE: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRequest {
    pub command: String,
    pub shell_tag: String,
    /// Relative to the session directory.
    pub working_dir: PathBuf,
    pub step: u32,
    pub ordinal: usize,
}

impl CommandRequest {
    pub fn exec_id(&self) -> String {
        format!("{}-{}", self.step, self.ordinal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Ran,
    Denied { rule: String },
    NeedsApprovalTimedOut,
    TimedOut,
    SpawnFailed { cause: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub request: CommandRequest,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub exit_status: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

impl ExecutionRecord {
    fn without_process(request: CommandRequest, verdict: Verdict) -> Self {
        let now = epoch_ms();
        Self {
            request,
            verdict,
            exit_status: None,
            stdout: String::new(),
            stderr: String::new(),
            duration_ms: 0,
            stdout_truncated: false,
            stderr_truncated: false,
            started_at_ms: now,
            finished_at_ms: now,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub exec_id: String,
    pub command: String,
    pub shell_tag: String,
    pub step: u32,
    pub ordinal: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalDecision {
    Approve,
    Deny,
    TimedOut,
}

/// Resolves `NeedsApproval` verdicts: an interactive prompt, a console
/// endpoint, or a script.
pub trait ApprovalOracle: Send + Sync {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision;
}

/// Oracle that answers every request the same way.
#[derive(Debug, Clone, Copy)]
pub struct FixedApproval(pub ApprovalDecision);

impl ApprovalOracle for FixedApproval {
    fn decide(&self, _request: &ApprovalRequest) -> ApprovalDecision {
        self.0
    }
}

/// Oracle that replays a fixed sequence of decisions, then times out.
#[derive(Debug, Default)]
pub struct ScriptedApproval {
    decisions: Mutex<std::collections::VecDeque<ApprovalDecision>>,
}

impl ScriptedApproval {
    pub fn new(decisions: impl IntoIterator<Item = ApprovalDecision>) -> Self {
        Self {
            decisions: Mutex::new(decisions.into_iter().collect()),
        }
    }
}

impl ApprovalOracle for ScriptedApproval {
    fn decide(&self, _request: &ApprovalRequest) -> ApprovalDecision {
        self.decisions
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or(ApprovalDecision::TimedOut)
    }
}

/// Observer hooks, used to write transcript events as execution proceeds.
pub trait ExecutionListener {
    fn approval_requested(&mut self, _request: &ApprovalRequest) {}
    fn approval_resolved(&mut self, _request: &ApprovalRequest, _decision: ApprovalDecision) {}
    fn command_started(&mut self, _request: &CommandRequest) {}
    fn command_finished(&mut self, _record: &ExecutionRecord) {}
}

pub struct NoopListener;

impl ExecutionListener for NoopListener {}

pub fn default_shells() -> BTreeMap<String, Vec<String>> {
    let mut shells = BTreeMap::new();
    let mut put = |tag: &str, argv: &[&str]| {
        shells.insert(tag.to_string(), argv.iter().map(|s| s.to_string()).collect());
    };
    put("cmd", &["cmd", "/C"]);
    put("powershell", &["powershell", "-NoProfile", "-NonInteractive", "-Command"]);
    put("bash", &["bash", "-c"]);
    put("sh", &["sh", "-c"]);
    put("shell", &["sh", "-c"]);
    shells
}

pub fn epoch_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Default)]
struct Capture {
    kept: Vec<u8>,
    total: usize,
    done: bool,
}

fn spawn_reader<R: Read + Send + 'static>(mut source: R, cap: usize) -> Arc<Mutex<Capture>> {
    let capture = Arc::new(Mutex::new(Capture::default()));
    let sink = Arc::clone(&capture);
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match source.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut c = sink.lock().unwrap();
                    let room = cap.saturating_sub(c.kept.len());
                    let take = room.min(n);
                    c.kept.extend_from_slice(&buf[..take]);
                    c.total += n;
                }
            }
        }
        sink.lock().unwrap().done = true;
    });
    capture
}

fn wait_reader(capture: &Arc<Mutex<Capture>>, deadline: Instant) {
    while !capture.lock().unwrap().done && Instant::now() < deadline {
        thread::sleep(POLL_INTERVAL);
    }
}

/// Decodes captured bytes, normalizes newlines and enforces the byte cap.
fn finish_capture(capture: &Arc<Mutex<Capture>>, cap: usize) -> (String, bool) {
    let c = capture.lock().unwrap();
    let mut text = String::from_utf8_lossy(&c.kept).replace("\r\n", "\n");
    if text.len() > cap {
        let mut end = cap;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        text.truncate(end);
    }
    (text, c.total > cap)
}

#[cfg(unix)]
fn configure_group(command: &mut Command) {
    use std::os::unix::process::CommandExt;
    command.process_group(0);
}

#[cfg(not(unix))]
fn configure_group(_command: &mut Command) {}

#[cfg(unix)]
fn kill_tree(child: &mut Child) {
    // The child leads its own process group; signal the whole group.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut Child) {
    let _ = child.kill();
}

/// Runs commands for one session directory.
pub struct Executor {
    session_dir: PathBuf,
    shells: BTreeMap<String, Vec<String>>,
    env: Vec<(String, String)>,
    raw_capture: bool,
    spawns: AtomicUsize,
}

/// Directory, relative to the session, holding raw output sidecars.
pub const RAW_CAPTURE_DIR: &str = "raw";

/// Sidecar paths for one command's raw stdout and stderr bytes.
pub fn raw_capture_paths(request: &CommandRequest) -> (PathBuf, PathBuf) {
    let stem = format!("step{}_cmd{}", request.step, request.ordinal);
    let dir = Path::new(RAW_CAPTURE_DIR);
    (dir.join(format!("{stem}.stdout")), dir.join(format!("{stem}.stderr")))
}

impl Executor {
    pub fn new(session_dir: impl Into<PathBuf>) -> Self {
        Self {
            session_dir: session_dir.into(),
            shells: default_shells(),
            env: Vec::new(),
            raw_capture: false,
            spawns: AtomicUsize::new(0),
        }
    }

    pub fn with_shells(mut self, shells: BTreeMap<String, Vec<String>>) -> Self {
        self.shells.extend(shells);
        self
    }

    /// Extra environment variables for every spawned command.
    pub fn with_env(mut self, env: impl IntoIterator<Item = (String, String)>) -> Self {
        self.env.extend(env);
        self
    }

    /// Keeps the captured bytes, before newline normalization, in sidecar
    /// files under [`RAW_CAPTURE_DIR`].
    pub fn with_raw_capture(mut self, enabled: bool) -> Self {
        self.raw_capture = enabled;
        self
    }

    pub fn session_dir(&self) -> &Path {
        &self.session_dir
    }

    /// Number of processes spawned so far.
    pub fn spawn_count(&self) -> usize {
        self.spawns.load(Ordering::SeqCst)
    }

    pub fn execute(
        &self,
        request: CommandRequest,
        policy: &Policy,
        approval: &dyn ApprovalOracle,
        listener: &mut dyn ExecutionListener,
    ) -> ExecutionRecord {
        let decision = policy.evaluate_in(&request.command, &request.working_dir, &self.session_dir);
        match decision {
            PolicyDecision::Allow => {}
            PolicyDecision::Deny(rule) => {
                listener.command_started(&request);
                let record = ExecutionRecord::without_process(request, Verdict::Denied { rule });
                listener.command_finished(&record);
                return record;
            }
            PolicyDecision::NeedsApproval => {
                let ask = ApprovalRequest {
                    exec_id: request.exec_id(),
                    command: request.command.clone(),
                    shell_tag: request.shell_tag.clone(),
                    step: request.step,
                    ordinal: request.ordinal,
                };
                listener.approval_requested(&ask);
                let decision = approval.decide(&ask);
                listener.approval_resolved(&ask, decision);
                let verdict = match decision {
                    ApprovalDecision::Approve => None,
                    ApprovalDecision::Deny => Some(Verdict::Denied {
                        rule: OPERATOR_RULE.to_string(),
                    }),
                    ApprovalDecision::TimedOut => Some(Verdict::NeedsApprovalTimedOut),
                };
                if let Some(verdict) = verdict {
                    listener.command_started(&request);
                    let record = ExecutionRecord::without_process(request, verdict);
                    listener.command_finished(&record);
                    return record;
                }
            }
        }

        listener.command_started(&request);
        let record = self.run_process(request, policy);
        listener.command_finished(&record);
        record
    }

    pub fn execute_all(
        &self,
        requests: Vec<CommandRequest>,
        policy: &Policy,
        approval: &dyn ApprovalOracle,
        listener: &mut dyn ExecutionListener,
    ) -> Vec<ExecutionRecord> {
        requests
            .into_iter()
            .map(|r| self.execute(r, policy, approval, listener))
            .collect()
    }

    fn run_process(&self, request: CommandRequest, policy: &Policy) -> ExecutionRecord {
        let cap = policy.max_output_bytes();
        let timeout = Duration::from_millis(policy.timeout_ms());
        let started_at_ms = epoch_ms();
        let started = Instant::now();

        let argv = match self.shells.get(&request.shell_tag) {
            Some(argv) if !argv.is_empty() => argv,
            _ => {
                let cause = format!("no shell configured for tag {:?}", request.shell_tag);
                return ExecutionRecord::without_process(request, Verdict::SpawnFailed { cause });
            }
        };
        let mut command = Command::new(&argv[0]);
        command
            .args(&argv[1..])
            .arg(&request.command)
            .current_dir(self.session_dir.join(&request.working_dir))
            .envs(self.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        configure_group(&mut command);

        self.spawns.fetch_add(1, Ordering::SeqCst);
        let mut child = match command.spawn() {
            Ok(child) => child,
            Err(e) => {
                let cause = e.to_string();
                return ExecutionRecord::without_process(request, Verdict::SpawnFailed { cause });
            }
        };
        let out = spawn_reader(child.stdout.take().expect("piped stdout"), cap);
        let err = spawn_reader(child.stderr.take().expect("piped stderr"), cap);

        let deadline = started + timeout;
        let (exit_status, timed_out) = loop {
            match child.try_wait() {
                Ok(Some(status)) => break (status.code(), false),
                Ok(None) if Instant::now() >= deadline => {
                    kill_tree(&mut child);
                    let _ = child.wait();
                    break (None, true);
                }
                Ok(None) => thread::sleep(POLL_INTERVAL),
                Err(_) => {
                    kill_tree(&mut child);
                    let _ = child.wait();
                    break (None, false);
                }
            }
        };

        // Orphaned grandchildren may hold the pipes open; don't wait on them forever.
        let grace = Instant::now() + READER_GRACE;
        wait_reader(&out, grace);
        wait_reader(&err, grace);
        if self.raw_capture {
            let (out_path, err_path) = raw_capture_paths(&request);
            for (path, capture) in [(out_path, &out), (err_path, &err)] {
                let bytes = capture.lock().unwrap().kept.clone();
                // A failed sidecar write does not change the command outcome.
                let _ = write_atomic(&self.session_dir.join(path), &bytes);
            }
        }
        let (stdout, stdout_truncated) = finish_capture(&out, cap);
        let (stderr, stderr_truncated) = finish_capture(&err, cap);

        ExecutionRecord {
            request,
            verdict: if timed_out { Verdict::TimedOut } else { Verdict::Ran },
            exit_status,
            stdout,
            stderr,
            duration_ms: started.elapsed().as_millis() as u64,
            stdout_truncated,
            stderr_truncated,
            started_at_ms,
            finished_at_ms: epoch_ms(),
        }
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::policy::{PolicyMode, PolicySpec};

    fn req(command: &str, ordinal: usize) -> CommandRequest {
        CommandRequest {
            command: command.into(),
            shell_tag: "sh".into(),
            working_dir: PathBuf::from("."),
            step: 0,
            ordinal,
        }
    }

    fn policy(spec: PolicySpec) -> Policy {
        Policy::new(spec).unwrap()
    }

    fn run(exec: &Executor, command: &str, p: &Policy) -> ExecutionRecord {
        exec.execute(req(command, 0), p, &FixedApproval(ApprovalDecision::Deny), &mut NoopListener)
    }

    #[test]
    fn raw_capture_keeps_crlf_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path()).with_raw_capture(true);
        let r = run(&exec, "printf 'a\\r\\nb'; printf 'e' >&2", &Policy::default());
        assert_eq!(r.stdout, "a\nb");
        let (out, err) = raw_capture_paths(&r.request);
        assert_eq!(std::fs::read(dir.path().join(out)).unwrap(), b"a\r\nb");
        assert_eq!(std::fs::read(dir.path().join(err)).unwrap(), b"e");

        let plain = tempfile::tempdir().unwrap();
        run(&Executor::new(plain.path()), "echo x", &Policy::default());
        assert!(!plain.path().join(RAW_CAPTURE_DIR).exists());
    }

    #[test]
    fn echo_runs() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let r = run(&exec, "echo hello", &Policy::default());
        assert_eq!(r.verdict, Verdict::Ran);
        assert_eq!(r.exit_status, Some(0));
        assert_eq!(r.stdout, "hello\n");
        assert!(!r.stdout_truncated);
    }

    #[test]
    fn denied_never_spawns() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let p = policy(PolicySpec {
            deny: vec!["del*".into()],
            ..Default::default()
        });
        let r = run(&exec, "del /s *", &p);
        assert_eq!(r.verdict, Verdict::Denied { rule: "del*".into() });
        assert!(r.stdout.is_empty() && r.stderr.is_empty());
        assert_eq!(r.duration_ms, 0);
        assert_eq!(exec.spawn_count(), 0);
    }

    #[test]
    fn approval_paths() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let p = policy(PolicySpec {
            mode: PolicyMode::ApproveAll,
            ..Default::default()
        });
        let approve = FixedApproval(ApprovalDecision::Approve);
        let r = exec.execute(req("echo ok", 0), &p, &approve, &mut NoopListener);
        assert_eq!(r.verdict, Verdict::Ran);
        let r = exec.execute(req("echo no", 1), &p, &FixedApproval(ApprovalDecision::Deny), &mut NoopListener);
        assert_eq!(r.verdict, Verdict::Denied { rule: OPERATOR_RULE.into() });
        let r = exec.execute(req("echo late", 2), &p, &ScriptedApproval::default(), &mut NoopListener);
        assert_eq!(r.verdict, Verdict::NeedsApprovalTimedOut);
        assert_eq!(exec.spawn_count(), 1);
    }

    #[test]
    fn nonzero_exit_is_data_and_loop_continues() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let records = exec.execute_all(
            vec![req("bad_command_xyz", 0), req("echo ok", 1)],
            &Policy::default(),
            &FixedApproval(ApprovalDecision::Approve),
            &mut NoopListener,
        );
        assert_eq!(records.len(), 2);
        assert_ne!(records[0].exit_status, Some(0));
        assert_eq!(records[1].verdict, Verdict::Ran);
        assert_eq!(records[1].stdout, "ok\n");
        assert!(records[0].finished_at_ms <= records[1].started_at_ms);
    }

    #[test]
    fn empty_batch() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let r = exec.execute_all(vec![], &Policy::default(), &FixedApproval(ApprovalDecision::Approve), &mut NoopListener);
        assert!(r.is_empty());
    }

    #[test]
    fn missing_shell_is_spawn_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut shells = BTreeMap::new();
        shells.insert("sh".to_string(), vec!["/nonexistent/shell-binary".to_string()]);
        let exec = Executor::new(dir.path()).with_shells(shells);
        let r = run(&exec, "echo hi", &Policy::default());
        assert!(matches!(r.verdict, Verdict::SpawnFailed { .. }));
        // and the executor keeps working
        let exec = Executor::new(dir.path());
        assert_eq!(run(&exec, "echo hi", &Policy::default()).verdict, Verdict::Ran);
    }

    #[test]
    fn output_cap_and_binary_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let p = policy(PolicySpec {
            max_output_bytes: 100,
            ..Default::default()
        });
        let r = run(&exec, "head -c 1000 /dev/zero | tr '\\0' 'x'", &p);
        assert_eq!(r.stdout.len(), 100);
        assert!(r.stdout_truncated && !r.stderr_truncated);

        let r = run(&exec, "head -c 5000 /dev/urandom", &p);
        assert!(r.stdout.len() <= 100);
        assert!(r.stdout_truncated);
        assert_eq!(run(&exec, "echo next", &p).stdout, "next\n");
    }

    #[test]
    fn exactly_at_cap_is_not_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let p = policy(PolicySpec {
            max_output_bytes: 4,
            ..Default::default()
        });
        let r = run(&exec, "printf abcd", &p);
        assert_eq!(r.stdout, "abcd");
        assert!(!r.stdout_truncated);
    }

    #[test]
    fn timeout_kills_process_group() {
        let dir = tempfile::tempdir().unwrap();
        let exec = Executor::new(dir.path());
        let p = policy(PolicySpec {
            timeout_ms: 300,
            ..Default::default()
        });
        let r = run(&exec, "sleep 5; echo never", &p);
        assert_eq!(r.verdict, Verdict::TimedOut);
        assert!(r.duration_ms >= 300 && r.duration_ms < 800, "{}", r.duration_ms);
        assert!(!r.stdout.contains("never"));
    }

    #[test]
    fn extra_env_and_working_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let exec = Executor::new(dir.path()).with_env([("FORGELOOP_TEST".to_string(), "v".to_string())]);
        let mut r = req("echo $FORGELOOP_TEST; basename \"$PWD\"", 0);
        r.working_dir = PathBuf::from("sub");
        let rec = exec.execute(r, &Policy::default(), &FixedApproval(ApprovalDecision::Approve), &mut NoopListener);
        assert_eq!(rec.stdout, "v\nsub\n");
    }
}
