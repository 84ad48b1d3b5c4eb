//! Built-in admin solvers. They run inside the broker process and never
//! contact an agent.

mod registration;

use std::fs;
use std::path::Path;
use std::process::Command;

use solverhub_core::store::{Store, DONE};
use solverhub_core::wire::{Client, Request, WireError};
use solverhub_core::SolverKey;

use crate::jobfiles;
use crate::registry::{Registration, Registry};
use crate::{BrokerError, Shared};

use registration::{addsolver, status};

/// Lists the admin solvers, one `Name=TYPE:ID` line each.
pub const ADMIN_LIST: &str = "admin_list";
pub const GENERAL_HELP: &str = "general_help";

pub const ADDSOLVER_TOKENS: &str = "\
Solver category: : solver_type: NULL: solver_type
Solver identifier: : solver_id: NULL: solver_id
Solver name: : solver_name: NULL: solver_name
Password: : password: NULL: password
Contact address: : contact: NULL: contact
Background URL: : background_url: NULL: background_url
Solver stations: TEXT: begin.stations: end.stations: stations
Token configuration: TEXT: begin.tokens: end.tokens: tokens
Usage restrictions: TEXT: begin.restrictions: end.restrictions: restrictions
Email help: TEXT: begin.email-help: end.email-help: email-help
Tool help: TEXT: begin.tool-help: end.tool-help: tool-help
Web help: TEXT: begin.web-help: end.web-help: web-help
Web samples: TEXT: begin.web-samples: end.web-samples: web-samples
Abstract: TEXT: begin.abstract: end.abstract: abstract
";

pub const STATUS_TOKENS: &str = "\
Solver category: : solver_type: NULL: solver_type
Solver identifier: : solver_id: NULL: solver_id
Password: : password: NULL: password
Action: RADIO .Enable,enable .Disable,disable .Delete,delete: action: NULL: action
";

pub const KILL_JOB_TOKENS: &str = "\
Job number: : job_number: NULL: job_number
Job password: : job_password: NULL: job_password
";

// An empty label keeps the parse report as `help.type ()`.
pub const HELP_TOKENS: &str = ": : help: NULL: help.type\n";

const ADDSOLVER_HELP: &str = "\
To add or modify a solver, submit a job to ADMIN:ADDSOLVER:

type admin
solver addsolver
solver_type = <category abbreviation>
solver_id = <identifier: letters, digits, '-' and '_'>
solver_name = <name shown in the solver list>
password = <password; needed again to modify or remove the solver>
contact = <administrator address, user@host>
background_url = <optional page about the solver>
begin.stations
<host> [<maximum concurrent jobs>]
end.stations
begin.tokens
<label>: <kind>: <begin token>: <end token or NULL>: <target file>
end.tokens
begin.restrictions
<#max|#max_any_one_user|#max_any_one_domain> <minute|hour|day|month> <count>
end.restrictions
begin.email-help
<help text returned by ADMIN:HELP>
end.email-help
begin.tool-help
<help text returned to submission tools>
end.tool-help
END-SERVER-INPUT

Any section may also be given in sized form, e.g. `begin.tokens[120]`
followed by exactly 120 bytes. Leave solver_type blank for a list of the
available categories. Re-registering an existing solver needs its original
password; stations dropped from the list are deregistered.
";

const STATUS_HELP: &str = "\
To enable, disable or delete a solver, submit a job to ADMIN:STATUS:

type admin
solver status
solver_type = <category>
solver_id = <identifier>
password = <registration password>
action = <enable|disable|delete>
END-SERVER-INPUT

A disabled solver keeps its registration but accepts no jobs. Deleting a
solver removes its registration; it can only be restored by registering it
again.
";

const KILL_JOB_HELP: &str = "\
To stop a running job, submit a job to ADMIN:KILL_JOB:

type admin
solver kill_job
job_number = <job number>
job_password = <the password printed when the job was scheduled>
END-SERVER-INPUT

The reply comes from the solver station. Stations only kill jobs when
their administrator has enabled it.
";

const HELP_HELP: &str = "\
For help on a solver, submit a job to ADMIN:HELP:

help TYPE:ID
END-SERVER-INPUT

Without a solver name you get the general help text and the solver list.
";

const GENERAL_HELP_TEXT: &str = "\
Jobs are submitted as one token-delimited body: a TYPE line and a SOLVER
line naming the solver, the sections listed in the solver's token
configuration, and an END-SERVER-INPUT line.

For help on a particular solver, send `help TYPE:ID` to ADMIN:HELP.
";

struct Builtin {
    id: &'static str,
    name: &'static str,
    tokens: &'static str,
    help: &'static str,
}

const BUILTINS: [Builtin; 4] = [
    Builtin {
        id: "ADDSOLVER",
        name: "Adding/Modifying a Solver",
        tokens: ADDSOLVER_TOKENS,
        help: ADDSOLVER_HELP,
    },
    Builtin {
        id: "STATUS",
        name: "Enabling/Disabling a Solver",
        tokens: STATUS_TOKENS,
        help: STATUS_HELP,
    },
    Builtin {
        id: "KILL_JOB",
        name: "Kill Job",
        tokens: KILL_JOB_TOKENS,
        help: KILL_JOB_HELP,
    },
    Builtin {
        id: "HELP",
        name: "Help Facility",
        tokens: HELP_TOKENS,
        help: HELP_HELP,
    },
];

/// Writes the admin registrations, admin_list and general_help. Existing
/// files are left alone so a server administrator can edit them.
pub fn install(store: &Store, registry: &Registry) -> Result<(), BrokerError> {
    let _guard = registry.lock();
    for b in &BUILTINS {
        let key = SolverKey::new("ADMIN", b.id).expect("valid key");
        if registry.exists(&key) {
            continue;
        }
        registry.save(&Registration {
            key,
            name: b.name.to_string(),
            password_hash: String::new(),
            contact: String::new(),
            stations: Vec::new(),
            tokens: b.tokens.to_string(),
            restrictions: Vec::new(),
            email_help: Some(b.help.to_string()),
            tool_help: Some(b.help.to_string()),
            web_help: None,
            web_samples: None,
            abstract_text: None,
            background_url: None,
            solve: Some(format!("builtin:{}", b.id.to_ascii_lowercase())),
        })?;
    }
    let dir = registry.admin_dir();
    fs::create_dir_all(&dir)?;
    let list = dir.join(ADMIN_LIST);
    if !list.exists() {
        let text: String = BUILTINS
            .iter()
            .map(|b| format!("{}=ADMIN:{}\n", b.name, b.id))
            .collect();
        store.write_atomic(&list, text.as_bytes())?;
    }
    let general = dir.join(GENERAL_HELP);
    if !general.exists() {
        store.write_atomic(&general, GENERAL_HELP_TEXT.as_bytes())?;
    }
    Ok(())
}

/// Trimmed contents of a parsed field file, empty if absent.
pub(crate) fn field(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name))
        .map(|s| s.trim().to_string())
        .unwrap_or_default()
}

/// Runs the admin solver `key` on the job in `dir` and returns the results
/// text.
pub(crate) fn run(shared: &Shared, key: &SolverKey, dir: &Path) -> String {
    let solve = match shared.registry.load(key) {
        Ok(Some(reg)) => reg.solve.unwrap_or_default(),
        Ok(None) => return format!("The admin solver {key} is not installed.\n"),
        Err(e) => return format!("The admin solver {key} cannot be loaded: {e}\n"),
    };
    match solve.as_str() {
        "builtin:addsolver" => addsolver(shared, dir),
        "builtin:status" => status(shared, dir),
        "builtin:help" => help(shared, dir),
        "builtin:kill_job" => kill_job(shared, dir),
        "" => format!("The admin solver {key} has no driver.\n"),
        path => run_external(shared, key, path, dir),
    }
}

/// A driver dropped into the admin library: runs in the job directory and
/// leaves job.results there.
fn run_external(shared: &Shared, key: &SolverKey, path: &str, dir: &Path) -> String {
    let program = shared.registry.admin_dir().join(path);
    match Command::new(&program).current_dir(dir).output() {
        Ok(out) => {
            let _ = jobfiles::append_out_bytes(dir, &out.stdout);
            match fs::read_to_string(dir.join(jobfiles::RESULTS)) {
                Ok(text) => text,
                Err(_) => format!(
                    "The admin solver {key} finished ({}) without writing results.\n",
                    out.status
                ),
            }
        }
        Err(e) => format!(
            "The admin solver {key} could not run {}: {e}\n",
            program.display()
        ),
    }
}

fn help(shared: &Shared, dir: &Path) -> String {
    let requested = field(dir, "help.type");
    let key = requested
        .split_whitespace()
        .next()
        .and_then(|w| w.parse::<SolverKey>().ok())
        .or_else(|| {
            jobfiles::read_text(dir, jobfiles::HELP_FOR).and_then(|s| s.parse::<SolverKey>().ok())
        });
    if let Some(key) = key {
        if let Ok(Some(reg)) = shared.registry.load(&key) {
            if key.is_admin() || shared.registry.is_listed(&key) {
                return match reg.email_help.filter(|t| !t.trim().is_empty()) {
                    Some(text) => format!(
                        "Help for {key} ({}):\n\n{text}\n{}",
                        reg.name,
                        interfaces_note()
                    ),
                    None => format!(
                        "Sorry, no help is available for {key}. The solver's administrator has not provided any.\n"
                    ),
                };
            }
        }
    }
    general_help(
        shared.registry.admin_dir().as_path(),
        &shared.registry,
        &requested,
    )
}

fn interfaces_note() -> String {
    "Jobs are accepted through the socket, web and email-style interfaces.\n".to_string()
}

fn general_help(admin_dir: &Path, registry: &Registry, requested: &str) -> String {
    let mut text = String::new();
    if !requested.is_empty() {
        text.push_str(&format!("No solver `{requested}` is registered.\n\n"));
    }
    text.push_str(
        &fs::read_to_string(admin_dir.join(GENERAL_HELP))
            .unwrap_or_else(|_| GENERAL_HELP_TEXT.to_string()),
    );
    text.push_str("\nRegistered solvers:\n");
    for (name, key) in registry.solver_list() {
        text.push_str(&format!("  {key:<24} {name}\n"));
    }
    text.push_str("\nAdministrative solvers:\n");
    for line in fs::read_to_string(admin_dir.join(ADMIN_LIST))
        .unwrap_or_default()
        .lines()
    {
        if let Some((name, key)) = line.rsplit_once('=') {
            text.push_str(&format!("  {:<24} {name}\n", key.trim()));
        }
    }
    text
}

fn kill_job(shared: &Shared, dir: &Path) -> String {
    let number_text = field(dir, "job_number");
    let Ok(number) = number_text.parse::<u64>() else {
        return format!("`{number_text}` is not a job number.\n");
    };
    let target = shared.store.job_dir(number);
    if !target.is_dir() {
        return format!("Job {number} is dead: it is no longer on the server.\n");
    }
    let password = field(dir, "job_password");
    let expected = jobfiles::read_text(&target, jobfiles::PASSWORD).unwrap_or_default();
    if expected.is_empty() || password != expected {
        return format!("The password given for job {number} is not correct.\n");
    }
    if target.join(DONE).exists() {
        return format!("Job {number} is dead: it has already finished.\n");
    }
    let Some(station) = jobfiles::read_text(&target, jobfiles::STATION) else {
        return format!("Job {number} is not running on a solver station.\n");
    };
    let client = Client::new(
        station.clone(),
        shared.config.server_name.replace(char::is_whitespace, "_"),
    );
    match client.call(&Request::KillJob(number), &[]) {
        Ok(reply) => String::from_utf8_lossy(&reply).into_owned(),
        Err(WireError::Remote(msg)) => format!("{msg}\n"),
        Err(e) => {
            format!("The solver station {station} for job {number} could not be reached: {e}\n")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use solverhub_core::token::parse_token_config;

    #[test]
    fn builtin_configs_parse() {
        for b in &BUILTINS {
            let c = parse_token_config(b.tokens.as_bytes()).unwrap();
            assert!(!c.is_empty(), "{}", b.id);
        }
        let help = parse_token_config(HELP_TOKENS.as_bytes()).unwrap();
        assert_eq!(help.entries()[0].label, "");
        assert_eq!(help.entries()[0].target_file, "help.type");
    }

    #[test]
    fn install_is_idempotent_and_keeps_edits() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::init(tmp.path()).unwrap();
        let registry = Registry::new(&store);
        install(&store, &registry).unwrap();
        let list = fs::read_to_string(registry.admin_dir().join(ADMIN_LIST)).unwrap();
        assert_eq!(list.lines().count(), 4);
        for id in ["ADDSOLVER", "STATUS", "KILL_JOB", "HELP"] {
            assert!(list.contains(&format!("=ADMIN:{id}")), "{id}");
            let reg = registry
                .load(&SolverKey::new("ADMIN", id).unwrap())
                .unwrap()
                .unwrap();
            assert!(reg.password_hash.is_empty());
            reg.token_config().unwrap();
        }
        fs::write(registry.admin_dir().join(GENERAL_HELP), "local text\n").unwrap();
        install(&store, &registry).unwrap();
        assert_eq!(
            fs::read_to_string(registry.admin_dir().join(GENERAL_HELP)).unwrap(),
            "local text\n"
        );
    }

    #[test]
    fn general_help_names_admin_solvers() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::init(tmp.path()).unwrap();
        let registry = Registry::new(&store);
        install(&store, &registry).unwrap();
        let text = general_help(&registry.admin_dir(), &registry, "");
        for id in ["ADDSOLVER", "STATUS", "KILL_JOB", "HELP"] {
            assert!(text.contains(&format!("ADMIN:{id}")), "{id}");
        }
    }
}
