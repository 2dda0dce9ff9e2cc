use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use forgeloop::config::RuntimeConfig;
use forgeloop::executor::{ApprovalOracle, ApprovalRequest};
use forgeloop::gateway::{load_script, GatewayError, RecordingBackend};
use forgeloop::replay::replay_transcript;
use forgeloop::scenario::{run_scenario_with, Scenario, ScenarioError};
use forgeloop::session::{PauseReason, SessionError};
use forgeloop::{
    ApprovalDecision, CompletionBackend, LiveBackend, Session, SessionConfig, SessionStatus,
};
use forgeloop_console::{bind, Console, ConsoleSettings};

use crate::args::{Cli, Command, GlobalFlags};
use crate::render::describe;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_ERROR: u8 = 2;
pub const EXIT_MAX_STEPS: u8 = 3;

fn fail(message: impl std::fmt::Display) -> u8 {
    eprintln!("forgeloop: {message}");
    EXIT_ERROR
}

pub fn dispatch(cli: Cli) -> u8 {
    let is_serve = matches!(cli.command, Command::Serve { .. });
    let layer = match cli.flags.layer(is_serve) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let config = match RuntimeConfig::from_process(layer) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let flags = &cli.flags;
    match cli.command {
        Command::Repl => repl(&config, flags, false),
        Command::Record => repl(&config, flags, true),
        Command::Run { task } => run(&config, flags, &task),
        Command::Serve {
            bind,
            allow_remote,
            token,
        } => serve(&config, flags, SocketAddr::new(bind, config.console_port), allow_remote, token),
        Command::Replay { transcript } => replay(&config, flags, transcript.as_deref()),
    }
}

fn live_backend(config: &RuntimeConfig) -> Result<LiveBackend, String> {
    LiveBackend::from_env(config.endpoint_url.clone()).map_err(|e| match e {
        GatewayError::MissingCredential => format!(
            "refusing to start live mode: {} is not set (pass --script to use a scripted model)",
            forgeloop::gateway::API_KEY_ENV
        ),
        other => other.to_string(),
    })
}

/// Scripted backend when `--script` is given, otherwise the live endpoint.
fn backend(config: &RuntimeConfig, flags: &GlobalFlags) -> Result<Box<dyn CompletionBackend>, String> {
    match &flags.script {
        Some(path) => load_script(path)
            .map(|m| Box::new(m) as Box<dyn CompletionBackend>)
            .map_err(|e| format!("{}: {e}", path.display())),
        None => live_backend(config).map(|b| Box::new(b) as Box<dyn CompletionBackend>),
    }
}

fn session_config(config: &RuntimeConfig, flags: &GlobalFlags) -> Result<SessionConfig, String> {
    let mut sc = config.session_config().map_err(|e| e.to_string())?;
    sc.raw_capture = flags.raw_capture;
    Ok(sc)
}

fn session_dir(config: &RuntimeConfig, flags: &GlobalFlags) -> PathBuf {
    flags
        .session_dir
        .clone()
        .unwrap_or_else(|| config.session_root.join(uuid::Uuid::new_v4().to_string()))
}

type SharedOut = Arc<Mutex<Box<dyn Write + Send>>>;
type SharedIn = Arc<Mutex<Box<dyn BufRead + Send>>>;

fn say(out: &SharedOut, text: &str) {
    let mut w = out.lock().unwrap_or_else(|e| e.into_inner());
    let _ = writeln!(w, "{text}");
    let _ = w.flush();
}

/// Prints a summary line for every transcript event appended from now on.
fn follow(session: &Session, out: SharedOut) {
    let from = session.transcript().len() as u64;
    session.transcript().subscribe_from(from, move |record| {
        if let Some(text) = describe(&record.event) {
            say(&out, &text);
        }
        true
    });
}

/// Asks the operator on the terminal. End of input counts as a denial.
struct PromptApproval {
    input: SharedIn,
    output: SharedOut,
}

impl ApprovalOracle for PromptApproval {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        {
            let mut w = self.output.lock().unwrap_or_else(|e| e.into_inner());
            let _ = write!(w, "  approve `{}`? [y/N] ", request.command);
            let _ = w.flush();
        }
        let mut line = String::new();
        let read = self.input.lock().unwrap_or_else(|e| e.into_inner()).read_line(&mut line);
        match read {
            Ok(n) if n > 0 && matches!(line.trim().to_ascii_lowercase().as_str(), "y" | "yes") => {
                ApprovalDecision::Approve
            }
            _ => ApprovalDecision::Deny,
        }
    }
}

fn open_session(
    dir: &Path,
    config: SessionConfig,
    backend: Box<dyn CompletionBackend>,
    approval: Arc<dyn ApprovalOracle>,
) -> Result<Session, String> {
    Session::resume(dir, config, backend, approval).map_err(|e| format!("{}: {e}", dir.display()))
}

fn repl(config: &RuntimeConfig, flags: &GlobalFlags, record: bool) -> u8 {
    let backend: Box<dyn CompletionBackend> = if record {
        let Some(path) = flags.script.clone() else {
            return fail("record needs --script <file> for the captured responses");
        };
        if path.exists() {
            return fail(format!("{} already exists; refusing to overwrite", path.display()));
        }
        match live_backend(config) {
            Ok(live) => Box::new(RecordingBackend::new(live, path)),
            Err(e) => return fail(e),
        }
    } else {
        match backend(config, flags) {
            Ok(b) => b,
            Err(e) => return fail(e),
        }
    };
    let sc = match session_config(config, flags) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let input: SharedIn = Arc::new(Mutex::new(Box::new(io::BufReader::new(io::stdin()))));
    let output: SharedOut = Arc::new(Mutex::new(Box::new(io::stdout())));
    let approval = Arc::new(PromptApproval {
        input: Arc::clone(&input),
        output: Arc::clone(&output),
    });
    let dir = session_dir(config, flags);
    let mut session = match open_session(&dir, sc, backend, approval) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    say(&output, &format!("session directory: {}", dir.display()));
    follow(&session, Arc::clone(&output));

    loop {
        let state = session.state();
        if !state.status.accepts_input() {
            say(&output, &format!("session is {}; exiting", state.status));
            return EXIT_OK;
        }
        let prompt = if state.status == SessionStatus::AwaitingTask {
            "task> "
        } else {
            "input> "
        };
        {
            let mut w = output.lock().unwrap_or_else(|e| e.into_inner());
            let _ = write!(w, "{prompt}");
            let _ = w.flush();
        }
        let mut line = String::new();
        match input.lock().unwrap_or_else(|e| e.into_inner()).read_line(&mut line) {
            Ok(0) | Err(_) => {
                say(&output, "");
                return EXIT_OK;
            }
            Ok(_) => {}
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Err(e) = session.submit_task(text) {
            say(&output, &format!("rejected: {e}"));
            continue;
        }
        match session.run_until_pause(None) {
            Ok(_) | Err(SessionError::Gateway(_)) | Err(SessionError::Storage(_)) => {}
            Err(e) => return fail(e),
        }
    }
}

fn run(config: &RuntimeConfig, flags: &GlobalFlags, task: &str) -> u8 {
    if task.trim().is_empty() {
        return fail("task must not be blank");
    }
    let backend = match backend(config, flags) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let sc = match session_config(config, flags) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let output: SharedOut = Arc::new(Mutex::new(Box::new(io::stdout())));
    let input: SharedIn = Arc::new(Mutex::new(Box::new(io::BufReader::new(io::stdin()))));
    let approval = Arc::new(PromptApproval {
        input,
        output: Arc::clone(&output),
    });
    let dir = session_dir(config, flags);
    let mut session = match open_session(&dir, sc, backend, approval) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    say(&output, &format!("session directory: {}", dir.display()));
    follow(&session, output);
    if let Err(e) = session.submit_task(task) {
        return fail(e);
    }
    match session.run_until_pause(None) {
        Ok(_) | Err(SessionError::Gateway(_)) | Err(SessionError::Storage(_)) => {}
        Err(e) => return fail(e),
    }
    match session.state().status {
        SessionStatus::AwaitingHuman {
            reason: PauseReason::MaxStepsReached,
        } => EXIT_MAX_STEPS,
        SessionStatus::AwaitingHuman { .. } => EXIT_OK,
        SessionStatus::Failed { cause } => {
            eprintln!("forgeloop: session failed: {cause}");
            EXIT_ERROR
        }
        other => fail(format!("session ended in unexpected state {other}")),
    }
}

fn replay(config: &RuntimeConfig, flags: &GlobalFlags, transcript: Option<&Path>) -> u8 {
    match (&flags.scenario, transcript) {
        (Some(name), None) => replay_scenario(config, flags, name),
        (None, Some(path)) => replay_file(config, flags, path),
        (Some(_), Some(_)) => fail("give either --scenario or a transcript path, not both"),
        (None, None) => fail("replay needs --scenario <name> or a transcript path"),
    }
}

fn replay_scenario(config: &RuntimeConfig, flags: &GlobalFlags, name: &str) -> u8 {
    let scenario = match Scenario::resolve(name) {
        Ok(s) => s,
        Err(ScenarioError::Unknown(n)) => {
            let known: Vec<&str> = forgeloop::scenario::BUILTIN.iter().map(|(n, _)| *n).collect();
            return fail(format!("unknown scenario {n:?} (built-in: {})", known.join(", ")));
        }
        Err(e) => return fail(e),
    };
    let dir = flags.session_dir.clone().unwrap_or_else(|| {
        config
            .session_root
            .join(format!("scenario-{}-{}", scenario.name, uuid::Uuid::new_v4()))
    });
    if dir.join(forgeloop::transcript::TRANSCRIPT_FILE).exists() {
        return fail(format!("{} already holds a session", dir.display()));
    }
    let report = match run_scenario_with(&scenario, &dir, config.parser.clone()) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    println!("scenario {} in {}", report.name, dir.display());
    for a in &report.assertions {
        let mark = if a.passed { "PASS" } else { "FAIL" };
        if a.detail.is_empty() {
            println!("  {mark} {}", a.description);
        } else {
            println!("  {mark} {}: {}", a.description, a.detail);
        }
    }
    println!(
        "  {} steps, final state {}, {} ms",
        report.steps, report.final_state.status, report.elapsed_ms
    );
    println!("  transcript hash {}", report.transcript_hash);
    if report.passed() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn replay_file(config: &RuntimeConfig, flags: &GlobalFlags, path: &Path) -> u8 {
    let path = if path.is_dir() {
        path.join(forgeloop::transcript::TRANSCRIPT_FILE)
    } else {
        path.to_path_buf()
    };
    if !path.is_file() {
        return fail(format!("no transcript at {}", path.display()));
    }
    let sc = match session_config(config, flags) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let dir = session_dir(config, flags);
    if dir.join(forgeloop::transcript::TRANSCRIPT_FILE).exists() {
        return fail(format!("{} already holds a session", dir.display()));
    }
    match replay_transcript(&path, &dir, sc) {
        Ok(outcome) => {
            println!("original {}", outcome.original_hash);
            println!("replay   {}", outcome.replay_hash);
            if outcome.matches() {
                println!("transcripts match ({})", dir.display());
                EXIT_OK
            } else {
                println!("transcripts differ; replay kept in {}", dir.display());
                EXIT_FAILURE
            }
        }
        Err(e) => fail(e),
    }
}

fn serve(
    config: &RuntimeConfig,
    flags: &GlobalFlags,
    addr: SocketAddr,
    allow_remote: bool,
    token: Option<String>,
) -> u8 {
    let base_config = match session_config(config, flags) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let factory: forgeloop_console::BackendFactory = match &flags.script {
        Some(path) => match load_script(path) {
            Ok(model) => Arc::new(move |_: &str| Ok(Box::new(model.clone()) as Box<dyn CompletionBackend>)),
            Err(e) => return fail(format!("{}: {e}", path.display())),
        },
        None => {
            if let Err(e) = live_backend(config) {
                return fail(e);
            }
            let config = config.clone();
            Arc::new(move |_: &str| live_backend(&config).map(|b| Box::new(b) as Box<dyn CompletionBackend>))
        }
    };
    let mut settings = ConsoleSettings::new(config.session_root.clone(), base_config, factory);
    settings.auth_token = token.clone();

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    runtime.block_on(async move {
        let listener = match bind(addr, allow_remote, token.as_deref()).await {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        let console = Console::new(settings);
        let loader = console.clone();
        let (loaded, failed) = tokio::task::spawn_blocking(move || loader.load_existing())
            .await
            .unwrap_or_default();
        for (dir, cause) in failed {
            eprintln!("forgeloop: skipping {}: {cause}", dir.display());
        }
        let local = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
        println!("console listening on http://{local} ({} sessions loaded)", loaded.len());
        let _ = io::stdout().flush();

        // Open event streams never end on their own, so stop serving outright.
        tokio::select! {
            served = console.serve(listener, std::future::pending()) => {
                if let Err(e) = served {
                    return fail(e);
                }
            }
            _ = shutdown_signal() => {}
        }
        let stopping = console.clone();
        let _ = tokio::task::spawn_blocking(move || stopping.shutdown()).await;
        println!("console stopped");
        EXIT_OK
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = match signal(SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
                return;
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}
