//! Starting and stopping the broker and agents as background processes.

use std::ffi::OsString;
use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use solverhub_agent::{Agent, AgentConfig, LogNotifier, NOTIFICATIONS};
use solverhub_broker::ops::{self, local_address};
use solverhub_broker::{Broker, BrokerConfig};
use solverhub_core::store::Store;
use solverhub_core::wire::{Client, Request};

const DAEMONS: [&str; 3] = ["receiver", "scheduler", "socket-server"];

/// Re-runs this executable in its own session with output to `log`.
fn spawn_detached(args: &[OsString], log: &Path) -> Result<Child> {
    let exe = std::env::current_exe().context("cannot find the solverhub executable")?;
    let out = File::options()
        .create(true)
        .append(true)
        .open(log)
        .with_context(|| format!("cannot open {}", log.display()))?;
    let err = out.try_clone()?;
    let mut cmd = Command::new(exe);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0);
    cmd.spawn().context("cannot start background process")
}

fn tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(10)..].join("\n")
}

fn absolute(path: &Path) -> Result<std::path::PathBuf> {
    fs::canonicalize(path).with_context(|| format!("cannot find {}", path.display()))
}

pub fn broker_run(config_path: &Path) -> Result<()> {
    let config = BrokerConfig::load(config_path)?;
    let handle = Broker::start(config)?;
    ops::write_pid(handle.store())?;
    log::info!("broker listening on {}", handle.addr());
    handle.wait();
    Ok(())
}

fn verify(config: &BrokerConfig, timeout: Duration) -> bool {
    let mut client = Client::new(local_address(&config.listen), "solverhub");
    client.connect_timeout = timeout;
    client.io_timeout = Some(timeout);
    client.call(&Request::Verify, &[]).is_ok()
}

pub fn broker_start(config_path: &Path, quiet: bool) -> Result<()> {
    let config_path = absolute(config_path)?;
    let config = BrokerConfig::load(&config_path)?;
    let store = Store::init(&config.server_var)?;
    if ops::recorded_pids(&store)
        .iter()
        .any(|&p| unsafe { libc::kill(p, 0) } == 0)
    {
        bail!(
            "{} is already running; use `broker restart`",
            config.server_name
        );
    }
    if !quiet {
        for d in DAEMONS {
            println!("starting {} {d}...", config.server_name);
        }
    }
    let log = store.logs_dir().join("broker.out");
    let args: Vec<OsString> = vec![
        "broker".into(),
        "run".into(),
        "--config".into(),
        config_path.into_os_string(),
    ];
    let mut child = spawn_detached(&args, &log)?;
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        if verify(&config, Duration::from_secs(1)) {
            return Ok(());
        }
        if let Some(status) = child.try_wait()? {
            bail!("the broker exited ({status}):\n{}", tail(&log));
        }
        if Instant::now() > deadline {
            bail!(
                "the broker did not answer within 20 seconds:\n{}",
                tail(&log)
            );
        }
        thread::sleep(Duration::from_millis(100));
    }
}

pub fn broker_stop(config_path: &Path) -> Result<()> {
    let config = BrokerConfig::load(config_path)?;
    let store = Store::init(&config.server_var)?;
    for d in DAEMONS {
        println!("killing {d}...");
    }
    ops::kill_recorded(&store, Duration::from_secs(5));
    Ok(())
}

pub fn agent_run(config_path: &Path) -> Result<()> {
    let config = AgentConfig::load(config_path)?;
    let root = config.work_root()?;
    fs::create_dir_all(&root)?;
    let notifier = Arc::new(LogNotifier::new(root.join(NOTIFICATIONS)));
    let handle = Agent::start(config, notifier)?;
    println!("{} ready", handle.identity());
    handle.wait();
    Ok(())
}

/// `(pid, port)` from the agent's pid file.
fn agent_pid(config: &AgentConfig) -> Result<Option<(i32, u16)>> {
    let path = solverhub_agent::pid_file(&config.work_root()?, config.key());
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(None);
    };
    let mut words = text.split_whitespace();
    match (
        words.next().and_then(|w| w.parse().ok()),
        words.next().and_then(|w| w.parse().ok()),
    ) {
        (Some(pid), Some(port)) => Ok(Some((pid, port))),
        _ => Err(anyhow!("{} is malformed", path.display())),
    }
}

fn alive(pid: i32) -> bool {
    unsafe { libc::kill(pid, 0) == 0 }
}

pub fn agent_start(config_path: &Path) -> Result<()> {
    let config_path = absolute(config_path)?;
    let config = AgentConfig::load(&config_path)?;
    config.validate()?;
    if let Some((pid, _)) = agent_pid(&config)? {
        if alive(pid) {
            bail!(
                "the agent for {} is already running (pid {pid})",
                config.key()
            );
        }
    }
    let root = config.work_root()?;
    fs::create_dir_all(root.join("daemons"))?;
    let log = root.join("daemons").join(format!("{}.log", config.key()));
    let args: Vec<OsString> = vec![
        "agent".into(),
        "start".into(),
        "--supervise".into(),
        config_path.into_os_string(),
    ];
    let mut child = spawn_detached(&args, &log)?;
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        if let Some((pid, port)) = agent_pid(&config)? {
            if pid == child.id() as i32 {
                println!(
                    "agent for {} started (pid {pid}, port {port})",
                    config.key()
                );
                return Ok(());
            }
        }
        if let Some(status) = child.try_wait()? {
            bail!("the agent exited ({status}):\n{}", tail(&log));
        }
        if Instant::now() > deadline {
            bail!(
                "the agent did not register within 30 seconds:\n{}",
                tail(&log)
            );
        }
        thread::sleep(Duration::from_millis(100));
    }
}

pub fn agent_stop(config_path: &Path) -> Result<()> {
    let config = AgentConfig::load(config_path)?;
    let Some((pid, _)) = agent_pid(&config)? else {
        bail!("no agent for {} is recorded as running", config.key());
    };
    if alive(pid) {
        unsafe {
            libc::kill(pid, libc::SIGTERM);
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        while alive(pid) && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(50));
        }
        if alive(pid) {
            unsafe {
                libc::kill(pid, libc::SIGKILL);
            }
        }
    }
    let _ = fs::remove_file(solverhub_agent::pid_file(
        &config.work_root()?,
        config.key(),
    ));
    println!("agent for {} stopped", config.key());
    Ok(())
}

pub fn agent_status(config_path: &Path) -> Result<()> {
    let config = AgentConfig::load(config_path)?;
    let Some((pid, port)) = agent_pid(&config)? else {
        bail!("no agent for {} is recorded as running", config.key());
    };
    let ip = config
        .source_ip()
        .map(|ip| ip.to_string())
        .unwrap_or_else(|| "127.0.0.1".into());
    let addr = if ip.contains(':') {
        format!("[{ip}]:{port}")
    } else {
        format!("{ip}:{port}")
    };
    let mut client = Client::new(addr, "solverhub");
    client.connect_timeout = Duration::from_secs(5);
    client.io_timeout = Some(Duration::from_secs(5));
    let id = client
        .call(&Request::Verify, &[])
        .map_err(|e| anyhow!("agent pid {pid} does not answer on port {port}: {e}"))?;
    println!("{} (pid {pid})", String::from_utf8_lossy(&id));
    Ok(())
}
