//! Runtime configuration, resolved from four layers in precedence order:
//! command-line flags, environment variables, the config file, defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::ParserConfig;
use crate::policy::{PolicyError, PolicySpec};
use crate::prompt::{PromptError, PromptTemplateSet, DEFAULT_TRUNCATION_BUDGET};
use crate::session::{SessionConfig, DEFAULT_HISTORY_WINDOW, DEFAULT_MAX_STEPS};

pub const CONFIG_ENV: &str = "FORGELOOP_CONFIG";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com";
pub const DEFAULT_MODEL: &str = "gpt-4-1106-preview";
pub const DEFAULT_CONSOLE_PORT: u16 = 7466;
pub const DEFAULT_SESSION_ROOT: &str = "sessions";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {cause}")]
    Read { path: String, cause: String },
    #[error("invalid config file {path}: {cause}")]
    Parse { path: String, cause: String },
    #[error("invalid value for {key}: {value:?}")]
    InvalidValue { key: String, value: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// One layer of configuration; `None` means "not set here".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub templates_dir: Option<PathBuf>,
    pub session_root: Option<PathBuf>,
    pub max_steps: Option<u32>,
    pub history_window: Option<usize>,
    pub console_port: Option<u16>,
    pub temperature: Option<f64>,
    pub truncation_budget: Option<usize>,
    pub policy: Option<PolicySpec>,
    pub parser: Option<ParserConfig>,
}

impl ConfigLayer {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            cause: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            cause: e.to_string(),
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Reads `FORGELOOP_*` variables. `FORGELOOP_POLICY` names a policy file.
    pub fn from_env(env: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        fn parsed<T: std::str::FromStr>(
            env: &BTreeMap<String, String>,
            key: &str,
        ) -> Result<Option<T>, ConfigError> {
            env.get(key)
                .map(|v| {
                    v.trim().parse().map_err(|_| ConfigError::InvalidValue {
                        key: key.to_string(),
                        value: v.clone(),
                    })
                })
                .transpose()
        }
        let policy = match env.get("FORGELOOP_POLICY") {
            Some(path) => Some(load_policy_file(Path::new(path))?),
            None => None,
        };
        Ok(Self {
            endpoint_url: env.get("FORGELOOP_ENDPOINT").cloned(),
            model_id: env.get("FORGELOOP_MODEL").cloned(),
            templates_dir: env.get("FORGELOOP_TEMPLATES_DIR").map(PathBuf::from),
            session_root: env.get("FORGELOOP_SESSION_ROOT").map(PathBuf::from),
            max_steps: parsed(env, "FORGELOOP_MAX_STEPS")?,
            history_window: parsed(env, "FORGELOOP_HISTORY_WINDOW")?,
            console_port: parsed(env, "FORGELOOP_CONSOLE_PORT")?,
            temperature: parsed(env, "FORGELOOP_TEMPERATURE")?,
            truncation_budget: parsed(env, "FORGELOOP_TRUNCATION_BUDGET")?,
            policy,
            parser: None,
        })
    }

    /// Fields set in `self` win over `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            endpoint_url: self.endpoint_url.or(lower.endpoint_url),
            model_id: self.model_id.or(lower.model_id),
            templates_dir: self.templates_dir.or(lower.templates_dir),
            session_root: self.session_root.or(lower.session_root),
            max_steps: self.max_steps.or(lower.max_steps),
            history_window: self.history_window.or(lower.history_window),
            console_port: self.console_port.or(lower.console_port),
            temperature: self.temperature.or(lower.temperature),
            truncation_budget: self.truncation_budget.or(lower.truncation_budget),
            policy: self.policy.or(lower.policy),
            parser: self.parser.or(lower.parser),
        }
    }
}

pub fn load_policy_file(path: &Path) -> Result<PolicySpec, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let spec = PolicySpec::from_toml(&text)?;
    spec.compile()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub templates_dir: Option<PathBuf>,
    pub policy: PolicySpec,
    pub session_root: PathBuf,
    pub max_steps: u32,
    pub history_window: usize,
    pub console_port: u16,
    pub temperature: f64,
    pub truncation_budget: usize,
    pub parser: ParserConfig,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            endpoint_url: DEFAULT_ENDPOINT.into(),
            model_id: DEFAULT_MODEL.into(),
            templates_dir: None,
            policy: PolicySpec::default(),
            session_root: PathBuf::from(DEFAULT_SESSION_ROOT),
            max_steps: DEFAULT_MAX_STEPS,
            history_window: DEFAULT_HISTORY_WINDOW,
            console_port: DEFAULT_CONSOLE_PORT,
            temperature: 0.0,
            truncation_budget: DEFAULT_TRUNCATION_BUDGET,
            parser: ParserConfig::default(),
        }
    }
}

impl RuntimeConfig {
    /// Merges `flags > env > file > defaults` and validates the result.
    pub fn resolve(
        flags: ConfigLayer,
        env: ConfigLayer,
        file: ConfigLayer,
    ) -> Result<Self, ConfigError> {
        let merged = flags.over(env).over(file);
        let d = RuntimeConfig::default();
        let config = RuntimeConfig {
            endpoint_url: merged.endpoint_url.unwrap_or(d.endpoint_url),
            model_id: merged.model_id.unwrap_or(d.model_id),
            templates_dir: merged.templates_dir.or(d.templates_dir),
            policy: merged.policy.unwrap_or(d.policy),
            session_root: merged.session_root.unwrap_or(d.session_root),
            max_steps: merged.max_steps.unwrap_or(d.max_steps),
            history_window: merged.history_window.unwrap_or(d.history_window),
            console_port: merged.console_port.unwrap_or(d.console_port),
            temperature: merged.temperature.unwrap_or(d.temperature),
            truncation_budget: merged.truncation_budget.unwrap_or(d.truncation_budget),
            parser: merged.parser.unwrap_or(d.parser),
        };
        config.validate()?;
        Ok(config)
    }

    /// Resolves from the process environment, reading the file named by
    /// `FORGELOOP_CONFIG` when it is set.
    pub fn from_process(flags: ConfigLayer) -> Result<Self, ConfigError> {
        let env: BTreeMap<String, String> = std::env::vars().collect();
        let file = match env.get(CONFIG_ENV) {
            Some(path) => ConfigLayer::from_file(Path::new(path))?,
            None => ConfigLayer::default(),
        };
        Self::resolve(flags, ConfigLayer::from_env(&env)?, file)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_steps == 0 {
            return Err(ConfigError::InvalidValue {
                key: "max_steps".into(),
                value: "0".into(),
            });
        }
        if self.history_window == 0 {
            return Err(ConfigError::InvalidValue {
                key: "history_window".into(),
                value: "0".into(),
            });
        }
        self.policy.compile()?;
        Ok(())
    }

    pub fn templates(&self) -> Result<PromptTemplateSet, ConfigError> {
        let mut set = match &self.templates_dir {
            Some(dir) => PromptTemplateSet::load(dir)?,
            None => PromptTemplateSet::default(),
        };
        set.truncation_budget = self.truncation_budget;
        Ok(set)
    }

    pub fn session_config(&self) -> Result<SessionConfig, ConfigError> {
        Ok(SessionConfig {
            max_steps: self.max_steps,
            history_window: self.history_window,
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_response_chars: 0,
            parser: self.parser.clone(),
            templates: self.templates()?,
            policy: self.policy.compile()?,
            command_env: Vec::new(),
            shells: Default::default(),
            raw_capture: false,
        })
    }
}
