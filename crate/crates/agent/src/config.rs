use std::env;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use solverhub_core::SolverKey;

use crate::AgentError;

/// Agent settings, normally read from a TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Broker `host:port`.
    pub broker: String,
    pub solver: SolverKeyField,
    pub password: String,
    pub contact: String,
    /// Absolute path of the driver executable.
    pub driver: PathBuf,
    /// Address to accept broker connections on; registrations and result
    /// uploads are also sent from this address.
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Host part of the `verify` reply; defaults to the listen address.
    #[serde(default)]
    pub host: Option<String>,
    #[serde(default)]
    pub killable: bool,
    /// Wall-clock seconds per job.
    #[serde(default = "default_time_limit")]
    pub time_limit: u64,
    /// Largest file a driver may write, in bytes.
    #[serde(default)]
    pub file_size_limit: Option<u64>,
    /// Tell the contact about every arriving job.
    #[serde(default)]
    pub notify: bool,
    /// Forward driver stderr as well as stdout.
    #[serde(default)]
    pub debug: bool,
    /// Keep job work directories.
    #[serde(default)]
    pub save: bool,
    /// Defaults to `$CACHE_HOME/.comms`, else `$HOME/.comms`.
    #[serde(default)]
    pub work_root: Option<PathBuf>,
    /// Registration attempts before giving up; 0 retries forever.
    #[serde(default = "default_register_attempts")]
    pub register_attempts: u32,
    /// First retry delay; doubles up to a minute.
    #[serde(default = "default_register_retry_ms")]
    pub register_retry_ms: u64,
    /// Time between TERM and KILL when a job is stopped.
    #[serde(default = "default_kill_grace_ms")]
    pub kill_grace_ms: u64,
}

/// `TYPE:ID` as a plain string in the file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(try_from = "String")]
pub struct SolverKeyField(pub SolverKey);

impl TryFrom<String> for SolverKeyField {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse().map(SolverKeyField).map_err(|e| format!("{e}"))
    }
}

fn default_listen() -> String {
    "0.0.0.0:0".into()
}
fn default_time_limit() -> u64 {
    3600
}
fn default_register_attempts() -> u32 {
    0
}
fn default_register_retry_ms() -> u64 {
    1000
}
fn default_kill_grace_ms() -> u64 {
    5000
}

impl AgentConfig {
    pub fn new(
        broker: &str,
        solver: SolverKey,
        password: &str,
        contact: &str,
        driver: &Path,
    ) -> Self {
        AgentConfig {
            broker: broker.to_string(),
            solver: SolverKeyField(solver),
            password: password.to_string(),
            contact: contact.to_string(),
            driver: driver.to_path_buf(),
            listen: default_listen(),
            host: None,
            killable: false,
            time_limit: default_time_limit(),
            file_size_limit: None,
            notify: false,
            debug: false,
            save: false,
            work_root: None,
            register_attempts: default_register_attempts(),
            register_retry_ms: default_register_retry_ms(),
            kill_grace_ms: default_kill_grace_ms(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn key(&self) -> &SolverKey {
        &self.solver.0
    }

    pub fn work_root(&self) -> Result<PathBuf, AgentError> {
        if let Some(p) = &self.work_root {
            return Ok(p.clone());
        }
        default_work_root()
    }

    pub fn time_limit(&self) -> Duration {
        Duration::from_secs(self.time_limit)
    }

    pub fn kill_grace(&self) -> Duration {
        Duration::from_millis(self.kill_grace_ms)
    }

    /// The listen IP when it names a specific interface.
    pub fn source_ip(&self) -> Option<IpAddr> {
        self.listen
            .parse::<SocketAddr>()
            .ok()
            .map(|a| a.ip())
            .filter(|ip| !ip.is_unspecified())
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !self.driver.is_absolute() {
            return Err(AgentError::Config(format!(
                "driver `{}` must be an absolute path",
                self.driver.display()
            )));
        }
        if !self.driver.is_file() {
            return Err(AgentError::Config(format!(
                "driver `{}` does not exist",
                self.driver.display()
            )));
        }
        if self.time_limit == 0 {
            return Err(AgentError::Config("time_limit must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_work_root() -> Result<PathBuf, AgentError> {
    let base = env::var_os("CACHE_HOME")
        .filter(|v| !v.is_empty())
        .or_else(|| env::var_os("HOME").filter(|v| !v.is_empty()))
        .ok_or_else(|| AgentError::Config("neither CACHE_HOME nor HOME is set".into()))?;
    Ok(PathBuf::from(base).join(".comms"))
}
