use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use forgeloop::config::{load_policy_file, ConfigError, ConfigLayer};

#[derive(Debug, Parser)]
#[command(name = "forgeloop", version, about = "Run a self-improving LLM agent loop")]
pub struct Cli {
    #[command(flatten)]
    pub flags: GlobalFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalFlags {
    /// Base URL of an OpenAI-compatible endpoint.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub max_steps: Option<u32>,
    /// Policy file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub policy: Option<PathBuf>,
    /// Scripted model responses; `record` writes its capture here instead.
    #[arg(long, global = true, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// Session directory (`serve`: the directory holding all sessions).
    #[arg(long, global = true, value_name = "DIR")]
    pub session_dir: Option<PathBuf>,
    /// Built-in scenario name or scenario file, for `replay`.
    #[arg(long, global = true, value_name = "NAME")]
    pub scenario: Option<String>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    /// Keep raw command output bytes in sidecar files under `raw/`.
    #[arg(long, global = true)]
    pub raw_capture: bool,
}

impl GlobalFlags {
    pub fn layer(&self, session_root_from_dir: bool) -> Result<ConfigLayer, ConfigError> {
        Ok(ConfigLayer {
            endpoint_url: self.endpoint.clone(),
            model_id: self.model.clone(),
            max_steps: self.max_steps,
            console_port: self.port,
            policy: self.policy.as_deref().map(load_policy_file).transpose()?,
            session_root: if session_root_from_dir {
                self.session_dir.clone()
            } else {
                None
            },
            ..ConfigLayer::default()
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interactive session: enter tasks and follow-up input on stdin.
    Repl,
    /// Run one task headlessly until the session pauses.
    Run {
        task: String,
    },
    /// Serve the console API.
    Serve {
        /// Allow binding a non-loopback address (requires --token).
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        #[arg(long)]
        allow_remote: bool,
        /// Bearer token required on every request.
        #[arg(long, env = "FORGELOOP_CONSOLE_TOKEN")]
        token: Option<String>,
    },
    /// Replay a scenario (`--scenario`) or re-execute a recorded transcript.
    Replay {
        transcript: Option<PathBuf>,
    },
    /// Interactive session against the live model, saving responses as a script.
    Record,
}
