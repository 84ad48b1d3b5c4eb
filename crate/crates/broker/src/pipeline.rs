//! Receiver, initializer and parser.

use std::fs;
use std::sync::Arc;
use std::thread;

use solverhub_core::store::{Disposition, Log};
use solverhub_core::token::{parse_submission, TokenConfig};
use solverhub_core::wire::CLEAR_SCREEN;
use solverhub_core::{Interface, SolverKey};

use crate::jobfiles::{self, append_out, finalize};
use crate::registry::{category_listing, job_password, read_categories};
use crate::{log_date, SchedMsg, Shared};

pub(crate) fn receiver_loop(shared: Arc<Shared>) {
    let store = &shared.store;
    store.log(
        Log::Receiver,
        &format!(
            "receiver: {} restart on {}.",
            shared.config.server_name,
            log_date()
        ),
    );
    loop {
        for interface in Interface::SPOOLED {
            match store.spool_collect(interface) {
                Ok(items) => {
                    for (name, body) in items {
                        initialize(&shared, interface, &name, body);
                    }
                }
                Err(e) => log::warn!("receiver: {interface} spool: {e}"),
            }
        }
        if !shared.nap(shared.config.receiver_poll()) {
            break;
        }
    }
}

/// Numbers a collected submission, creates its job directory, tells the
/// depositing interface the number and starts the parser.
pub(crate) fn initialize(
    shared: &Arc<Shared>,
    interface: Interface,
    name: &str,
    body: Vec<u8>,
) -> Option<u64> {
    let store = &shared.store;
    let number = match store.next_job_number() {
        Ok(n) => n,
        Err(e) => {
            log::error!("receiver: cannot number {interface}/{name}: {e}");
            store.log(Log::Receiver, &format!("receiver: ERROR: {e}"));
            return None;
        }
    };
    let dir = match store.create_job_dir(number, &body) {
        Ok(d) => d,
        Err(e) => {
            store.log(Log::Receiver, &format!("receiver: ERROR: {e}"));
            return None;
        }
    };
    let _ = fs::write(dir.join(jobfiles::INTERFACE), interface.tag());
    if let Ok(spool) = store.spool_dir(interface) {
        let target = spool.join(format!("{name}.number"));
        if let Err(e) = store.write_atomic(&target, format!("{number}\n").as_bytes()) {
            log::error!("receiver: cannot report number for {name}: {e}");
        }
    }
    store.log(
        Log::Receiver,
        &format!("receiver: {interface} submission {name} is job {number}."),
    );
    let s = Arc::clone(shared);
    let spawned = thread::Builder::new()
        .name(format!("parse-{number}"))
        .spawn(move || parse_stage(&s, number));
    if let Err(e) = spawned {
        log::error!("cannot start parser for job {number}: {e}");
    }
    Some(number)
}

fn parse_stage(shared: &Arc<Shared>, number: u64) {
    match parse_job(shared, number) {
        Ok(key) => {
            let mut seq = shared.parse_order.lock().unwrap_or_else(|e| e.into_inner());
            *seq += 1;
            let body = format!("{key}\n{}\n", *seq);
            if let Err(e) = shared
                .store
                .jobs_deposit(&format!("job.{number}"), body.as_bytes())
            {
                drop(seq);
                fail(
                    shared,
                    number,
                    &format!("The job could not be queued: {e}\n"),
                );
                return;
            }
            shared.store.log(
                Log::Receiver,
                &format!("parser: job {number} for {key} parsed (sequence {}).", *seq),
            );
            drop(seq);
            shared.notify(SchedMsg::Wake);
        }
        Err(text) => fail(shared, number, &text),
    }
}

fn fail(shared: &Shared, number: u64, text: &str) {
    let dir = shared.store.job_dir(number);
    append_out(
        &dir,
        &format!("  ERROR: {}\n", text.lines().next().unwrap_or("")),
    );
    shared
        .store
        .log(Log::Receiver, &format!("parser: job {number} failed."));
    finalize(
        &shared.store,
        number,
        Disposition::Failed,
        text,
        "parse failed",
    );
}

struct Header {
    from: String,
    sample: bool,
}

/// Splits off the mail-style header (lines up to the first blank line).
fn split_header(data: &[u8]) -> Result<(Header, &[u8]), String> {
    let mut pos = 0;
    let mut from = None;
    let mut sample = false;
    loop {
        let rest = &data[pos..];
        let (line, next) = match rest.iter().position(|&b| b == b'\n') {
            Some(i) => (&rest[..i], pos + i + 1),
            None => (rest, data.len()),
        };
        let line = String::from_utf8_lossy(line);
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            pos = next;
            break;
        }
        let Some((name, value)) = line.split_once(':') else {
            return Err(format!(
                "The submission header line `{}` is not of the form `Name: value`.\n",
                line.chars().take(60).collect::<String>()
            ));
        };
        if name.contains(char::is_whitespace) {
            return Err(format!(
                "The submission header line `{}` is not of the form `Name: value`.\n",
                line.chars().take(60).collect::<String>()
            ));
        }
        match name.to_ascii_lowercase().as_str() {
            "from" => from = Some(value.trim().to_string()),
            "sample" => sample = value.trim().eq_ignore_ascii_case("yes"),
            _ => {}
        }
        pos = next;
        if pos >= data.len() {
            break;
        }
    }
    let from = from
        .filter(|f| !f.is_empty())
        .ok_or_else(|| "The submission has no From: header line.\n".to_string())?;
    Ok((Header { from, sample }, &data[pos.min(data.len())..]))
}

/// First body line that is neither blank nor a TYPE/SOLVER line mentions
/// `help` as a word.
fn asks_for_help(body: &[u8]) -> bool {
    for line in body.split(|&b| b == b'\n' || b == b'\r') {
        let text = String::from_utf8_lossy(line);
        let mut words = text.split_whitespace();
        let Some(first) = words.next() else {
            continue;
        };
        if first.eq_ignore_ascii_case("TYPE") || first.eq_ignore_ascii_case("SOLVER") {
            continue;
        }
        return text
            .split_whitespace()
            .any(|w| w.eq_ignore_ascii_case("help"));
    }
    false
}

fn safe_target(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name != solverhub_core::store::DONE
        && !name.starts_with("job.")
        && !name.contains('/')
        && !name.contains('\0')
}

fn unknown_solver(shared: &Shared, what: &str) -> String {
    let cats = read_categories(&shared.config.solver_tree);
    let mut text = format!("{what}\n\n{}", category_listing(&cats));
    let listed = shared.registry.solver_list();
    if !listed.is_empty() {
        text.push_str("\nRegistered solvers:\n");
        for (name, key) in listed {
            text.push_str(&format!("  {key:<24} {name}\n"));
        }
    }
    text
}

/// Writes job.address, job.type, job.password and the section files.
fn parse_job(shared: &Shared, number: u64) -> Result<SolverKey, String> {
    let store = &shared.store;
    let dir = store.job_dir(number);
    append_out(
        &dir,
        &format!(
            "Welcome to {}!\n{CLEAR_SCREEN}\nParsing:\n",
            shared.config.server_name
        ),
    );
    let received = fs::read(dir.join(jobfiles::RECEIVED))
        .map_err(|e| format!("The submission could not be read: {e}\n"))?;
    if received.iter().all(u8::is_ascii_whitespace) {
        return Err("The submission was empty.\n".into());
    }
    let interface = jobfiles::read_text(&dir, jobfiles::INTERFACE).unwrap_or_default();
    let (header, body) = split_header(&received)?;
    let sender = match (interface.as_str(), header.sample) {
        ("WEB", true) => format!("TRIAL_WEB_USER {}", header.from),
        ("WEB", false) => format!("WEB_USER {}", header.from),
        _ => header.from,
    };
    fs::write(dir.join(jobfiles::ADDRESS), format!("{sender}\n")).map_err(|e| e.to_string())?;

    let named = parse_submission(body, &TokenConfig::default()).map_err(|e| e.to_string())?;
    let requested = SolverKey::new(&named.solver_type, &named.solver_id).ok();
    let help = asks_for_help(body);
    let key = if help {
        SolverKey::new("ADMIN", "HELP").expect("valid key")
    } else {
        match &requested {
            Some(k) => k.clone(),
            None if named.solver_type.trim().is_empty() => {
                return Err(unknown_solver(
                    shared,
                    "The submission does not name a solver (missing TYPE line).",
                ))
            }
            None => {
                return Err(unknown_solver(
                    shared,
                    &format!(
                        "`{}:{}` is not a valid solver name.",
                        named.solver_type, named.solver_id
                    ),
                ))
            }
        }
    };
    let reg = shared
        .registry
        .load(&key)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| unknown_solver(shared, &format!("No solver {key} is registered.")))?;
    if !key.is_admin() && !shared.registry.is_listed(&key) {
        return Err(format!("The solver {key} is currently disabled.\n"));
    }
    let config = reg.token_config().map_err(|e| e.to_string())?;
    let fields = parse_submission(body, &config).map_err(|e| format!("Parse error: {e}\n"))?;

    fs::write(dir.join(jobfiles::TYPE), format!("{key}\n")).map_err(|e| e.to_string())?;
    fs::write(
        dir.join(jobfiles::PASSWORD),
        format!("{}\n", job_password()),
    )
    .map_err(|e| e.to_string())?;
    if help {
        if let Some(k) = requested.filter(|k| k.id() != "HELP") {
            let _ = fs::write(dir.join(jobfiles::HELP_FOR), format!("{k}\n"));
        }
    }

    let mut report = String::new();
    let mut sections = fields.sections;
    if help && !sections.contains_key("help.type") {
        sections.insert("help.type".into(), Vec::new());
    }
    for (target, data) in &sections {
        if !safe_target(target) {
            log::warn!("job {number}: skipping unsafe target file `{target}`");
            continue;
        }
        fs::write(dir.join(target), data).map_err(|e| format!("Cannot write {target}: {e}\n"))?;
        let label = config
            .by_target(target)
            .map(|e| e.label.as_str())
            .unwrap_or("");
        report.push_str(&format!(
            "        {} bytes written to {target} ({label})\n",
            data.len()
        ));
    }
    append_out(&dir, &report);
    Ok(key)
}
