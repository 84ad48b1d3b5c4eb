//! Commands that read the broker's store directly.

use std::fs;
use std::path::Path;
use std::time::{Duration, SystemTime};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, NaiveDate, Utc};
use solverhub_broker::ops::{self, CheckOutcome, Period};
use solverhub_broker::BrokerConfig;
use solverhub_core::store::{queues_snapshot, Log, MasterFilter, Store};

const LOGS: [(&str, Log); 4] = [
    ("receiver", Log::Receiver),
    ("scheduler", Log::Scheduler),
    ("socket", Log::Socket),
    ("checker", Log::Checker),
];

pub fn open(config_path: &Path) -> Result<(BrokerConfig, Store)> {
    let config = BrokerConfig::load(config_path)?;
    let store = Store::init(&config.server_var)?;
    Ok((config, store))
}

pub fn queues(store: &Store) -> String {
    fs::read_to_string(store.queues_path()).unwrap_or_else(|_| queues_snapshot(&[], &[]))
}

pub fn log_tail(store: &Store, name: &str, lines: usize) -> Result<String> {
    let Some((_, log)) = LOGS.iter().find(|(n, _)| *n == name) else {
        let names: Vec<&str> = LOGS.iter().map(|(n, _)| *n).collect();
        bail!("unknown log `{name}`; the logs are: {}", names.join(", "));
    };
    let text = fs::read_to_string(store.log_path(*log)).unwrap_or_default();
    let all: Vec<&str> = text.lines().collect();
    let mut out = all[all.len().saturating_sub(lines)..].join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    Ok(out)
}

/// `YYYY-MM-DD` (midnight UTC) or RFC 3339.
pub fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .with_context(|| format!("`{s}` is not a date (YYYY-MM-DD) or RFC 3339 time"))
}

pub fn query(store: &Store, filter: &MasterFilter) -> Result<String> {
    let rows = store.query_master(filter)?;
    let mut out = String::new();
    for r in &rows {
        out.push_str(&format!(
            "{:>8}  {:<24} {:<9} {}  {}\n",
            r.number,
            r.solver_key,
            r.disposition.to_string(),
            r.received.format("%Y-%m-%d %H:%M:%S"),
            r.sender_tag
        ));
    }
    out.push_str(&format!(
        "{} job{}\n",
        rows.len(),
        if rows.len() == 1 { "" } else { "s" }
    ));
    Ok(out)
}

pub fn report(store: &Store, period: Period) -> Result<String> {
    Ok(ops::generate_report(store, period, Utc::now())?.to_string())
}

/// Returns true when the broker answered.
pub fn checker(config_path: &Path, timeout: Duration, restart: bool) -> Result<bool> {
    let (config, store) = open(config_path)?;
    match ops::check(&config, &store, timeout) {
        CheckOutcome::Alive => Ok(true),
        CheckOutcome::Dead { killed } => {
            eprintln!(
                "{} did not answer; killed {} stale process(es)",
                config.server_name,
                killed.len()
            );
            if restart {
                ops::log_restart(&config, &store);
                crate::daemon::broker_start(config_path, true)?;
                eprintln!("{} restarted", config.server_name);
            }
            Ok(false)
        }
    }
}

pub fn clean(store: &Store, days: u64) -> String {
    let report = store.clean(Duration::from_secs(days * 86_400), SystemTime::now());
    format!(
        "archived {} job director{}; filled {} master database gap row{}\n",
        report.archived,
        if report.archived == 1 { "y" } else { "ies" },
        report.filled,
        if report.filled == 1 { "" } else { "s" }
    )
}
