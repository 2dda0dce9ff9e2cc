use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn forgeloop(cwd: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_forgeloop"));
    cmd.current_dir(cwd).stdin(Stdio::null());
    for (key, _) in std::env::vars() {
        if key.starts_with("FORGELOOP_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn script(dir: &Path, name: &str, responses: &[&str]) -> PathBuf {
    let mut text = String::new();
    for r in responses {
        text.push_str(&format!("[[entry]]\nresponse = '''\n{r}\n'''\n\n"));
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const ECHO: &str = "```bash\necho from-agent\n```";
const DONE: &str = "Finished.";

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let s = script(dir.path(), "ok.toml", &[ECHO, DONE]);
    let o = forgeloop(dir.path())
        .args(["run", "say something", "--script"])
        .arg(&s)
        .args(["--session-dir", "s1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("$ echo from-agent"));
    assert!(text(&o).contains("> from-agent"));

    let s = script(dir.path(), "short.toml", &[ECHO]);
    let o = forgeloop(dir.path())
        .args(["run", "task", "--session-dir", "s2", "--script"])
        .arg(&s)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    let endless: Vec<&str> = std::iter::repeat_n(ECHO, 10).collect();
    let s = script(dir.path(), "endless.toml", &endless);
    let o = forgeloop(dir.path())
        .args(["run", "task", "--max-steps", "1", "--session-dir", "s3", "--script"])
        .arg(&s)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));

    let o = forgeloop(dir.path()).args(["run", "   ", "--script"]).arg(&s).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flag_beats_env_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let endless: Vec<&str> = std::iter::repeat_n(ECHO, 10).collect();
    let s = script(dir.path(), "endless.toml", &endless);
    let steps = |args: &[&str], env: Option<&str>, session: &str| {
        let mut cmd = forgeloop(dir.path());
        cmd.args(["run", "task", "--session-dir", session, "--script"]).arg(&s).args(args);
        if let Some(v) = env {
            cmd.env("FORGELOOP_MAX_STEPS", v);
        }
        let o = cmd.output().unwrap();
        assert_eq!(o.status.code(), Some(3), "{}", text(&o));
        text(&o).matches("[step ").count()
    };
    // Each step prints a model line and a done line.
    assert_eq!(steps(&["--max-steps", "2"], Some("4"), "a"), 4);
    assert_eq!(steps(&[], Some("3"), "b"), 6);
}

#[test]
fn live_mode_needs_credential() {
    let dir = tempfile::tempdir().unwrap();
    let o = forgeloop(dir.path())
        .env_remove("FORGELOOP_API_KEY")
        .args(["run", "task", "--endpoint", "http://127.0.0.1:9"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("refusing to start live mode"), "{}", text(&o));
    assert!(!dir.path().join("sessions").exists(), "nothing written before refusing");
}

#[test]
fn writes_stay_under_session_root() {
    let dir = tempfile::tempdir().unwrap();
    let s = script(dir.path(), "ok.toml", &["```python\nprint(1)\n```\n```bash\ntouch made-here\n```", DONE]);
    let o = forgeloop(dir.path())
        .args(["run", "task", "--raw-capture", "--script"])
        .arg(&s)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, vec!["ok.toml", "sessions"]);
    let sessions: Vec<PathBuf> = std::fs::read_dir(dir.path().join("sessions"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(sessions.len(), 1);
    let session = &sessions[0];
    for rel in ["transcript.jsonl", "made-here", "snippets/latest.py", "raw/step0_cmd0.stdout"] {
        assert!(session.join(rel).exists(), "{rel} missing");
    }
}

#[test]
fn replay_scenarios_and_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let o = forgeloop(dir.path())
        .args(["replay", "--scenario", "case1", "--session-dir", "c1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("PASS"));
    assert!(!text(&o).contains("FAIL"));

    let o = forgeloop(dir.path()).args(["replay", "--scenario", "case9"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("unknown scenario"), "{}", text(&o));
    let o = forgeloop(dir.path()).arg("replay").output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    // Record a session, then re-execute its transcript.
    let s = script(dir.path(), "ok.toml", &[ECHO, DONE]);
    let o = forgeloop(dir.path())
        .args(["run", "task", "--session-dir", "orig", "--script"])
        .arg(&s)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = forgeloop(dir.path())
        .args(["replay", "orig/transcript.jsonl", "--session-dir", "again"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("transcripts match"));

    // A parser that no longer recognises `bash` diverges.
    let cfg = dir.path().join("forgeloop.toml");
    std::fs::write(&cfg, "[parser.tags]\npython = \"program\"\nsh = \"shell\"\n").unwrap();
    let o = forgeloop(dir.path())
        .env("FORGELOOP_CONFIG", &cfg)
        .args(["replay", "orig", "--session-dir", "mutated"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("transcripts differ"));
}

fn repl_with(dir: &Path, args: &[&str], stdin: &str) -> Output {
    let mut child = forgeloop(dir)
        .arg("repl")
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn repl_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let s = script(dir.path(), "ok.toml", &[ECHO, DONE, DONE]);
    let s = s.to_str().unwrap();

    let o = repl_with(dir.path(), &["--script", s, "--session-dir", "r0"], "");
    assert_eq!(o.status.code(), Some(0), "end of input at the task prompt");

    let o = repl_with(dir.path(), &["--script", s, "--session-dir", "r1"], "do it\nthanks\n");
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("task> "));
    assert!(out.contains("[step 0]") && out.contains("[step 1]"));
    assert!(out.contains("paused after 2 steps"));
    assert!(out.contains("input> "));
    assert!(out.contains("[step 2]"));

    let policy = dir.path().join("approve.toml");
    std::fs::write(&policy, "mode = \"approve_all\"\n").unwrap();
    let o = repl_with(
        dir.path(),
        &["--script", s, "--session-dir", "r2", "--policy", policy.to_str().unwrap()],
        "do it\nn\n",
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("approve `echo from-agent`? [y/N]"));
    assert!(out.contains("denied by rule operator"));
    assert!(out.contains("[step 1]"), "loop continued after the denial");
}

#[test]
fn record_needs_output_path_and_credential() {
    let dir = tempfile::tempdir().unwrap();
    let o = forgeloop(dir.path()).arg("record").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = forgeloop(dir.path()).args(["record", "--script", "out.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("refusing to start live mode"));
}

fn http_get(port: u16, path: &str) -> String {
    let mut stream = std::net::TcpStream::connect(("127.0.0.1", port)).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    response
}

#[test]
fn serve_health_interrupt_and_port_in_use() {
    let dir = tempfile::tempdir().unwrap();
    let s = script(dir.path(), "ok.toml", &[DONE]);
    let mut child = forgeloop(dir.path())
        .args(["serve", "--port", "0", "--script"])
        .arg(&s)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let banner = lines.next().unwrap().unwrap();
    let port: u16 = banner
        .split("127.0.0.1:")
        .nth(1)
        .and_then(|rest| rest.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|p| p.parse().ok())
        .unwrap_or_else(|| panic!("no port in {banner:?}"));
    let health = http_get(port, "/health");
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let deadline = Instant::now() + Duration::from_secs(10);
    let code = loop {
        if let Some(status) = child.try_wait().unwrap() {
            break status.code();
        }
        assert!(Instant::now() < deadline, "serve did not stop");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(code, Some(0));

    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = forgeloop(dir.path())
        .args(["serve", "--port", &port, "--script"])
        .arg(&s)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("already in use"), "{}", text(&o));

    let o = forgeloop(dir.path())
        .args(["serve", "--bind", "0.0.0.0", "--port", "0", "--script"])
        .arg(&s)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("non-loopback"), "{}", text(&o));
}
