use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::BrokerError;

/// Broker settings, normally read from a TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    /// Name announced by `verify` and in the logs.
    pub server_name: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    pub server_var: PathBuf,
    #[serde(default)]
    pub artifacts_dir: Option<PathBuf>,
    /// Category tree, one `Full Name|abbrev` per line.
    pub solver_tree: PathBuf,
    /// Host name written in the socket log; defaults to the listen host.
    #[serde(default)]
    pub host: Option<String>,
    #[serde(default = "default_poll_ms")]
    pub receiver_poll_ms: u64,
    #[serde(default = "default_poll_ms")]
    pub scheduler_poll_ms: u64,
    /// How long a finished agent stream may wait for its results upload.
    #[serde(default = "default_results_grace_ms")]
    pub results_grace_ms: u64,
    #[serde(default = "default_bind_retries")]
    pub bind_retries: u32,
    #[serde(default = "default_bind_retry_ms")]
    pub bind_retry_ms: u64,
    /// How long the socket server waits for the initializer to number a job.
    #[serde(default = "default_number_wait_ms")]
    pub number_wait_ms: u64,
}

fn default_listen() -> String {
    format!("0.0.0.0:{}", solverhub_core::wire::DEFAULT_PORT)
}
fn default_poll_ms() -> u64 {
    1000
}
fn default_results_grace_ms() -> u64 {
    5000
}
fn default_bind_retries() -> u32 {
    5
}
fn default_bind_retry_ms() -> u64 {
    2000
}
fn default_number_wait_ms() -> u64 {
    30_000
}

impl BrokerConfig {
    /// Minimal config for the given paths; everything else at defaults.
    pub fn new(server_name: &str, server_var: &Path, solver_tree: &Path) -> Self {
        BrokerConfig {
            server_name: server_name.to_string(),
            listen: default_listen(),
            server_var: server_var.to_path_buf(),
            artifacts_dir: None,
            solver_tree: solver_tree.to_path_buf(),
            host: None,
            receiver_poll_ms: default_poll_ms(),
            scheduler_poll_ms: default_poll_ms(),
            results_grace_ms: default_results_grace_ms(),
            bind_retries: default_bind_retries(),
            bind_retry_ms: default_bind_retry_ms(),
            number_wait_ms: default_number_wait_ms(),
        }
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self, BrokerError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BrokerError::Config(format!("{}: {e}", path.display())))?;
        let mut config: BrokerConfig = toml::from_str(&text)
            .map_err(|e| BrokerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let absolute = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        absolute(&mut config.server_var);
        absolute(&mut config.solver_tree);
        if let Some(dir) = config.artifacts_dir.as_mut() {
            absolute(dir);
        }
        Ok(config)
    }

    pub fn host_name(&self) -> String {
        if let Some(h) = &self.host {
            return h.clone();
        }
        match self.listen.rsplit_once(':') {
            Some((host, _)) if !host.is_empty() && host != "0.0.0.0" && host != "[::]" => {
                host.to_string()
            }
            _ => "localhost".to_string(),
        }
    }

    pub fn receiver_poll(&self) -> Duration {
        Duration::from_millis(self.receiver_poll_ms)
    }
    pub fn scheduler_poll(&self) -> Duration {
        Duration::from_millis(self.scheduler_poll_ms)
    }
    pub fn results_grace(&self) -> Duration {
        Duration::from_millis(self.results_grace_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_with_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broker.toml");
        fs::write(
            &path,
            "server_name = \"My Server\"\nserver_var = \"var\"\nsolver_tree = \"tree\"\nlisten = \"opt.example.org:3333\"\n",
        )
        .unwrap();
        let c = BrokerConfig::load(&path).unwrap();
        assert_eq!(c.server_var, dir.path().join("var"));
        assert_eq!(c.receiver_poll(), Duration::from_secs(1));
        assert_eq!(c.host_name(), "opt.example.org");
        fs::write(&path, "server_name = \"x\"\nbogus = 1\n").unwrap();
        assert!(BrokerConfig::load(&path).is_err());
    }
}
