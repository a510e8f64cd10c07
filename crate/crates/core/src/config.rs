//! CLI configuration. Each setting comes from the first source that has it:
//! command-line flag, then environment variable, then the JSON config file,
//! then the built-in default.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::uq::{DEFAULT_CONSISTENCY_TOLERANCE_PX, DEFAULT_TRUST_THRESHOLD_PX};

pub const DEFAULT_REGISTRY_URL: &str = "http://127.0.0.1:8700/";
pub const DEFAULT_BROKER_URL: &str = "http://127.0.0.1:8701/";
pub const DEFAULT_STORE: &str = "fairfab-store";
pub const DEFAULT_TASK_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

/// Config file contents; every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub registry_url: Option<String>,
    pub broker_url: Option<String>,
    pub store: Option<PathBuf>,
    pub broker_state: Option<PathBuf>,
    pub runner: Option<PathBuf>,
    pub trust_threshold: Option<f64>,
    pub tolerance: Option<f64>,
    pub task_timeout_secs: Option<u64>,
    pub tombstone_fixture: Option<String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }
}

/// Values given on the command line or via environment (clap merges the two,
/// flag first).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub registry_url: Option<String>,
    pub broker_url: Option<String>,
    pub store: Option<PathBuf>,
    pub broker_state: Option<PathBuf>,
    pub runner: Option<PathBuf>,
    pub trust_threshold: Option<f64>,
    pub tolerance: Option<f64>,
    pub task_timeout_secs: Option<u64>,
    pub tombstone_fixture: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub registry_url: String,
    pub broker_url: String,
    pub store: PathBuf,
    pub broker_state: Option<PathBuf>,
    pub runner: PathBuf,
    pub trust_threshold: f64,
    pub tolerance: f64,
    pub task_timeout: Duration,
    pub tombstone_fixture: Option<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig::resolve(Overrides::default(), ConfigFile::default()).expect("defaults are valid")
    }
}

fn check_url(field: &'static str, s: String) -> Result<String, ConfigError> {
    let u = url::Url::parse(&s).map_err(|e| ConfigError::Invalid { field, message: format!("{s:?}: {e}") })?;
    if !matches!(u.scheme(), "http" | "https") || u.host_str().is_none() {
        return Err(ConfigError::Invalid { field, message: format!("{s:?} is not an http(s) URL") });
    }
    Ok(s)
}

/// `fairfab-runner` next to the running executable (or one level up, which
/// covers test binaries under `target/*/deps`).
pub fn default_runner() -> PathBuf {
    let name = format!("fairfab-runner{}", std::env::consts::EXE_SUFFIX);
    if let Ok(exe) = std::env::current_exe() {
        let mut dir = exe.parent();
        for _ in 0..2 {
            if let Some(d) = dir {
                let candidate = d.join(&name);
                if candidate.is_file() {
                    return candidate;
                }
                dir = d.parent();
            }
        }
    }
    PathBuf::from(name)
}

impl CliConfig {
    pub fn resolve(over: Overrides, file: ConfigFile) -> Result<Self, ConfigError> {
        let trust_threshold = over.trust_threshold.or(file.trust_threshold).unwrap_or(DEFAULT_TRUST_THRESHOLD_PX);
        if !(trust_threshold > 0.0 && trust_threshold.is_finite()) {
            return Err(ConfigError::Invalid { field: "trust_threshold", message: "must be positive".into() });
        }
        let tolerance = over.tolerance.or(file.tolerance).unwrap_or(DEFAULT_CONSISTENCY_TOLERANCE_PX);
        if !(tolerance >= 0.0 && tolerance.is_finite()) {
            return Err(ConfigError::Invalid { field: "tolerance", message: "must be non-negative".into() });
        }
        Ok(CliConfig {
            registry_url: check_url(
                "registry_url",
                over.registry_url.or(file.registry_url).unwrap_or_else(|| DEFAULT_REGISTRY_URL.into()),
            )?,
            broker_url: check_url(
                "broker_url",
                over.broker_url.or(file.broker_url).unwrap_or_else(|| DEFAULT_BROKER_URL.into()),
            )?,
            store: over.store.or(file.store).unwrap_or_else(|| DEFAULT_STORE.into()),
            broker_state: over.broker_state.or(file.broker_state),
            runner: over.runner.or(file.runner).unwrap_or_else(default_runner),
            trust_threshold,
            tolerance,
            task_timeout: Duration::from_secs(
                over.task_timeout_secs.or(file.task_timeout_secs).unwrap_or(DEFAULT_TASK_TIMEOUT_SECS),
            ),
            tombstone_fixture: over.tombstone_fixture.or(file.tombstone_fixture),
        })
    }
}
