//! Usage reports, the liveness checker and broker pid bookkeeping.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use solverhub_core::store::{Disposition, Log, MasterFilter, Store, StoreError};
use solverhub_core::wire::{Client, Request};

use crate::{log_date, BrokerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Period {
    Day,
    Week,
}

impl Period {
    pub fn length(self) -> chrono::Duration {
        match self {
            Period::Day => chrono::Duration::days(1),
            Period::Week => chrono::Duration::weeks(1),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counts {
    pub total: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub period: Period,
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
    pub solvers: BTreeMap<String, Counts>,
    pub interfaces: BTreeMap<String, Counts>,
    pub total: Counts,
}

/// Tallies master records received in the `period` ending at `now`.
pub fn generate_report(
    store: &Store,
    period: Period,
    now: DateTime<Utc>,
) -> Result<Report, StoreError> {
    let from = now - period.length();
    let records = store.query_master(&MasterFilter {
        received_from: Some(from),
        received_to: Some(now),
        ..MasterFilter::default()
    })?;
    let mut report = Report {
        period,
        from,
        to: now,
        solvers: BTreeMap::new(),
        interfaces: BTreeMap::new(),
        total: Counts::default(),
    };
    for r in &records {
        let failed = u64::from(r.disposition != Disposition::Done);
        let key = if r.solver_key.is_empty() {
            "(unparsed)".to_string()
        } else {
            r.solver_key.clone()
        };
        for c in [
            report.solvers.entry(key).or_default(),
            report
                .interfaces
                .entry(r.interface_tag().to_string())
                .or_default(),
            &mut report.total,
        ] {
            c.total += 1;
            c.failed += failed;
        }
    }
    Ok(report)
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.period {
            Period::Day => "Daily",
            Period::Week => "Weekly",
        };
        let stamp = "%Y-%m-%d %H:%M UTC";
        writeln!(
            f,
            "{name} usage report: {} to {}",
            self.from.format(stamp),
            self.to.format(stamp)
        )?;
        writeln!(
            f,
            "Total jobs: {} ({} failed)",
            self.total.total, self.total.failed
        )?;
        writeln!(f, "\nBy solver:")?;
        if self.solvers.is_empty() {
            writeln!(f, "  none")?;
        }
        for (key, c) in &self.solvers {
            writeln!(f, "  {key:<32} {:>6} {:>6} failed", c.total, c.failed)?;
        }
        writeln!(f, "\nBy interface:")?;
        if self.interfaces.is_empty() {
            writeln!(f, "  none")?;
        }
        for (tag, c) in &self.interfaces {
            writeln!(f, "  {tag:<32} {:>6} {:>6} failed", c.total, c.failed)?;
        }
        Ok(())
    }
}

pub fn pid_path(store: &Store) -> PathBuf {
    store.root().join("proc").join("broker.pid")
}

pub fn write_pid(store: &Store) -> io::Result<()> {
    store
        .write_atomic(
            &pid_path(store),
            format!("{}\n", std::process::id()).as_bytes(),
        )
        .map_err(io::Error::other)
}

pub fn recorded_pids(store: &Store) -> Vec<i32> {
    fs::read_to_string(pid_path(store))
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .filter(|&p: &i32| p > 0)
        .collect()
}

fn alive(pid: i32) -> bool {
    // SAFETY: signal 0 only checks that the process exists.
    unsafe { libc::kill(pid, 0) == 0 }
}

/// Sends TERM to each recorded broker pid, then KILL after `grace`, and
/// removes the pid file. Returns the pids that were signalled.
pub fn kill_recorded(store: &Store, grace: Duration) -> Vec<i32> {
    let me = std::process::id() as i32;
    let pids: Vec<i32> = recorded_pids(store)
        .into_iter()
        .filter(|&p| p != me && alive(p))
        .collect();
    for &p in &pids {
        // SAFETY: plain kill(2) on a pid read from our own pid file.
        unsafe {
            libc::kill(p, libc::SIGTERM);
        }
    }
    let deadline = Instant::now() + grace;
    while pids.iter().any(|&p| alive(p)) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(50));
    }
    for &p in pids.iter().filter(|&&p| alive(p)) {
        // SAFETY: as above.
        unsafe {
            libc::kill(p, libc::SIGKILL);
        }
    }
    let _ = fs::remove_file(pid_path(store));
    pids
}

/// Address a local client should use to reach the broker's listener.
pub fn local_address(listen: &str) -> String {
    match listen.parse::<SocketAddr>() {
        Ok(a) if a.ip().is_unspecified() => {
            let ip = match a.ip() {
                IpAddr::V4(_) => IpAddr::V4(Ipv4Addr::LOCALHOST),
                IpAddr::V6(_) => IpAddr::V6(Ipv6Addr::LOCALHOST),
            };
            SocketAddr::new(ip, a.port()).to_string()
        }
        _ => listen.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Alive,
    /// The broker did not answer; the pids that were killed.
    Dead {
        killed: Vec<i32>,
    },
}

/// Sends `verify` to the broker. If it does not answer within `timeout`,
/// logs the failure, kills the recorded broker processes and reports it
/// dead so the caller can restart it.
pub fn check(config: &BrokerConfig, store: &Store, timeout: Duration) -> CheckOutcome {
    let mut client = Client::new(local_address(&config.listen), "checker");
    client.connect_timeout = timeout;
    client.io_timeout = Some(timeout);
    let err = match client.call(&Request::Verify, &[]) {
        Ok(_) => return CheckOutcome::Alive,
        Err(e) => e,
    };
    let what = match &err {
        solverhub_core::wire::WireError::Io(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
            format!("connect: {e}")
        }
        solverhub_core::wire::WireError::Io(e)
            if matches!(
                e.kind(),
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
            ) =>
        {
            format!("no reply within {}s", timeout.as_secs_f32())
        }
        other => format!("connect: {other}"),
    };
    store.log(Log::Checker, &format!("client: ERROR: {what}"));
    store.log(
        Log::Checker,
        &format!(
            "checker: killing {} processes on {}.",
            config.server_name,
            log_date()
        ),
    );
    CheckOutcome::Dead {
        killed: kill_recorded(store, Duration::from_secs(5)),
    }
}

pub fn log_restart(config: &BrokerConfig, store: &Store) {
    store.log(
        Log::Checker,
        &format!(
            "checker: restarting {} on {}.",
            config.server_name,
            log_date()
        ),
    );
}
