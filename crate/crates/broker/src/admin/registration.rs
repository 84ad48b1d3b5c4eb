//! ADMIN:ADDSOLVER and ADMIN:STATUS.

use std::fs;
use std::path::Path;

use solverhub_core::token::parse_token_config;
use solverhub_core::SolverKey;

use super::field;
use crate::registry::{
    category_listing, hash_password, parse_stations, read_categories, verify_password, Registration,
};
use crate::restrict::parse_rules;
use crate::Shared;

/// Raw contents of an optional text section; `None` when absent or blank.
fn text(dir: &Path, name: &str) -> Option<String> {
    fs::read_to_string(dir.join(name))
        .ok()
        .filter(|t| !t.trim().is_empty())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn valid_contact(contact: &str) -> bool {
    match contact.split_once('@') {
        Some((user, host)) => {
            !user.is_empty()
                && !host.is_empty()
                && !host.contains('@')
                && !contact.contains(char::is_whitespace)
        }
        None => false,
    }
}

fn reserved_target(target: &str) -> bool {
    target.starts_with("job.") || target == solverhub_core::store::DONE
}

/// Checks every field and builds the registration; nothing is written here.
fn validate(shared: &Shared, dir: &Path) -> Result<(Registration, String), String> {
    let categories = read_categories(&shared.config.solver_tree);
    let solver_type = field(dir, "solver_type").to_ascii_uppercase();
    if solver_type.is_empty() {
        return Err(format!(
            "No solver category was given.\n\n{}",
            category_listing(&categories)
        ));
    }
    if solver_type == "ADMIN" {
        return Err("The ADMIN category is reserved for the built-in solvers.\n".into());
    }
    if !categories.iter().any(|(_, abbrev)| *abbrev == solver_type) {
        return Err(format!(
            "solver_type: `{solver_type}` is not a known category.\n\n{}",
            category_listing(&categories)
        ));
    }
    let id = field(dir, "solver_id");
    if !valid_id(&id) {
        return Err(format!(
            "solver_id: `{id}` must be non-empty and use only letters, digits, '-' and '_'.\n"
        ));
    }
    let key = SolverKey::new(&solver_type, &id).map_err(|e| format!("solver_id: {e}\n"))?;
    let name = field(dir, "solver_name");
    if name.is_empty() {
        return Err("solver_name: a solver name is required.\n".into());
    }
    let password = field(dir, "password");
    if password.is_empty() {
        return Err("password: a password is required.\n".into());
    }
    let contact = field(dir, "contact");
    if !valid_contact(&contact) {
        return Err(format!(
            "contact: `{contact}` is not an address of the form user@host.\n"
        ));
    }
    let stations = parse_stations(&text(dir, "stations").unwrap_or_default())
        .map_err(|e| format!("stations: {e}\n"))?;
    if stations.is_empty() {
        return Err("stations: at least one solver station is required.\n".into());
    }
    let tokens = text(dir, "tokens").unwrap_or_default();
    let config = parse_token_config(tokens.as_bytes()).map_err(|e| format!("tokens: {e}\n"))?;
    if config.is_empty() {
        return Err("tokens: the token configuration is empty.\n".into());
    }
    if let Some(e) = config
        .entries()
        .iter()
        .find(|e| reserved_target(&e.target_file))
    {
        return Err(format!(
            "tokens: target file `{}` is reserved by the server.\n",
            e.target_file
        ));
    }
    let restrictions = parse_rules(&text(dir, "restrictions").unwrap_or_default())
        .map_err(|e| format!("restrictions: {e}\n"))?;
    let background = field(dir, "background_url");
    let reg = Registration {
        key,
        name,
        password_hash: hash_password(&password),
        contact,
        stations,
        tokens,
        restrictions,
        email_help: text(dir, "email-help"),
        tool_help: text(dir, "tool-help"),
        web_help: text(dir, "web-help"),
        web_samples: text(dir, "web-samples"),
        abstract_text: text(dir, "abstract"),
        background_url: (!background.is_empty()).then_some(background),
        solve: None,
    };
    Ok((reg, password))
}

pub(crate) fn addsolver(shared: &Shared, dir: &Path) -> String {
    let (reg, password) = match validate(shared, dir) {
        Ok(v) => v,
        Err(text) => return format!("The solver was not registered.\n{text}"),
    };
    let registry = &shared.registry;
    let _guard = registry.lock();
    let key = reg.key.clone();
    let existing = match registry.load(&key) {
        Ok(r) => r,
        Err(e) => return format!("The solver was not registered.\n{e}\n"),
    };
    let listed = match &existing {
        Some(old) => {
            if !verify_password(&old.password_hash, &password) {
                return format!(
                    "The solver was not registered.\npassword: {key} is already registered and the password does not match.\n"
                );
            }
            registry.is_listed(&key)
        }
        None => true,
    };
    let result = registry
        .save(&reg)
        .and_then(|_| registry.set_listed(&key, &reg.name, listed))
        .and_then(|_| registry.prune_station_ports(&key, &reg.stations));
    let dropped = match result {
        Ok(n) => n,
        Err(e) => return format!("The solver could not be registered: {e}\n"),
    };
    log::info!("addsolver: {key}: no web pages to generate");

    let mut out = format!(
        "{} {key} ({}).\n",
        if existing.is_some() {
            "Updated"
        } else {
            "Registered"
        },
        reg.name
    );
    out.push_str("Solver stations:\n");
    for s in &reg.stations {
        out.push_str(&format!(
            "  {} ({} concurrent job{})\n",
            s.host,
            s.capacity,
            if s.capacity == 1 { "" } else { "s" }
        ));
    }
    if dropped > 0 {
        out.push_str(&format!("{dropped} station registration(s) removed.\n"));
    }
    if !listed {
        out.push_str(&format!(
            "{key} is disabled; use ADMIN:STATUS to enable it.\n"
        ));
    }
    out.push_str("Start the agent on each station so the server can reach the solver.\n");
    out
}

pub(crate) fn status(shared: &Shared, dir: &Path) -> String {
    let key = match SolverKey::new(&field(dir, "solver_type"), &field(dir, "solver_id")) {
        Ok(k) => k,
        Err(e) => return format!("Refused: {e}.\n"),
    };
    if key.is_admin() {
        return format!("Refused: {key} is a built-in solver.\n");
    }
    let registry = &shared.registry;
    let _guard = registry.lock();
    let reg = match registry.load(&key) {
        Ok(Some(r)) => r,
        Ok(None) => return format!("Refused: no solver {key} is registered.\n"),
        Err(e) => return format!("Refused: {e}\n"),
    };
    if !verify_password(&reg.password_hash, &field(dir, "password")) {
        return format!("Refused: incorrect password for {key}.\n");
    }
    let action = field(dir, "action").to_ascii_lowercase();
    let result = match action.as_str() {
        "enable" => registry
            .set_listed(&key, &reg.name, true)
            .map(|_| format!("{key} is enabled.\n")),
        "disable" => registry
            .set_listed(&key, &reg.name, false)
            .map(|_| format!("{key} is disabled.\n")),
        "delete" => registry
            .set_listed(&key, &reg.name, false)
            .and_then(|_| registry.remove(&key))
            .and_then(|_| registry.prune_station_ports(&key, &[]))
            .map(|_| {
                log::info!("status: {key}: no web pages to remove");
                format!("{key} is deleted. Register it again to restore it.\n")
            }),
        other => {
            return format!("Refused: unknown action `{other}` (enable, disable or delete).\n")
        }
    };
    result.unwrap_or_else(|e| format!("{key}: {e}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::shared;
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    fn job(dir: &Path, fields: &[(&str, &str)]) -> PathBuf {
        let job = dir.join(format!("job-{}", rand::random::<u32>()));
        fs::create_dir_all(&job).unwrap();
        for (name, value) in fields {
            fs::write(job.join(name), value).unwrap();
        }
        job
    }

    fn registration<'a>(password: &'a str, stations: &'a str) -> Vec<(&'a str, &'a str)> {
        vec![
            ("solver_type", "misc"),
            ("solver_id", "Echo-1"),
            ("solver_name", "Echo"),
            ("password", password),
            ("contact", "admin@example.org"),
            ("stations", stations),
            ("tokens", "Input::begin.in:end.in:IN\n"),
            ("restrictions", "#max hour 20\n"),
            ("email-help", "send begin.in\n"),
        ]
    }

    /// Every file under `root` except logs and scratch jobs.
    fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
            for e in fs::read_dir(dir).unwrap().flatten() {
                let p = e.path();
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                if rel.starts_with("logs") || rel.starts_with("scratch") {
                    continue;
                }
                if p.is_dir() {
                    out.insert(rel, Vec::new());
                    walk(root, &p, out);
                } else {
                    out.insert(rel, fs::read(&p).unwrap());
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(root, root, &mut out);
        out
    }

    #[test]
    fn blank_or_unknown_category_lists_categories() {
        let (tmp, s) = shared();
        let out = addsolver(
            &s,
            &job(&tmp.path().join("scratch"), &[("solver_type", "")]),
        );
        assert!(out.contains("Available solver categories:"), "{out}");
        assert!(out.contains("MISC"), "{out}");
        let out = addsolver(
            &s,
            &job(&tmp.path().join("scratch"), &[("solver_type", "nope")]),
        );
        assert!(out.contains("solver_type") && out.contains("MISC"), "{out}");
    }

    #[test]
    fn each_bad_field_is_named_and_nothing_written() {
        let (tmp, s) = shared();
        let before = snapshot(tmp.path());
        let cases: [(&str, &str, &str); 7] = [
            ("solver_id", "bad id", "solver_id"),
            ("solver_name", "", "solver_name"),
            ("password", "", "password"),
            ("contact", "nobody", "contact"),
            ("stations", "", "stations"),
            ("tokens", "not a config\n", "tokens"),
            ("restrictions", "#max fortnight 2\n", "restrictions"),
        ];
        for (name, value, expect) in cases {
            let mut fields = registration("pw", "localhost 2\n");
            fields.retain(|(n, _)| *n != name);
            fields.push((name, value));
            let out = addsolver(&s, &job(&tmp.path().join("scratch"), &fields));
            assert!(out.starts_with("The solver was not registered."), "{out}");
            assert!(out.contains(expect), "{name}: {out}");
        }
        let mut fields = registration("pw", "localhost\n");
        fields.push(("tokens", "x::begin.x:end.x:job.results\n"));
        fields.retain(|(n, v)| *n != "tokens" || v.contains("job.results"));
        let out = addsolver(&s, &job(&tmp.path().join("scratch"), &fields));
        assert!(out.contains("reserved"), "{out}");
        assert_eq!(snapshot(tmp.path()), before);
    }

    #[test]
    fn register_then_update_requires_password() {
        let (tmp, s) = shared();
        let out = addsolver(
            &s,
            &job(
                &tmp.path().join("scratch"),
                &registration("pw", "localhost 3\n"),
            ),
        );
        assert!(out.starts_with("Registered MISC:ECHO-1"), "{out}");
        let list = fs::read_to_string(s.registry.solver_list_path()).unwrap();
        assert_eq!(list, "Echo=MISC:ECHO-1\n");
        let key: SolverKey = "MISC:ECHO-1".parse().unwrap();
        let before = s.registry.load(&key).unwrap().unwrap();
        assert_eq!(before.tokens, "Input::begin.in:end.in:IN\n");

        let out = addsolver(
            &s,
            &job(
                &tmp.path().join("scratch"),
                &registration("other", "elsewhere\n"),
            ),
        );
        assert!(out.contains("password does not match"), "{out}");
        assert_eq!(s.registry.load(&key).unwrap().unwrap(), before);
    }

    #[test]
    fn update_drops_removed_station_ports() {
        let (tmp, s) = shared();
        addsolver(
            &s,
            &job(
                &tmp.path().join("scratch"),
                &registration("pw", "alpha 1\nbeta 1\n"),
            ),
        );
        let key: SolverKey = "MISC:ECHO-1".parse().unwrap();
        s.registry.set_station_port("alpha", &key, 4000).unwrap();
        s.registry.set_station_port("beta", &key, 4001).unwrap();
        let out = addsolver(
            &s,
            &job(&tmp.path().join("scratch"), &registration("pw", "beta 2\n")),
        );
        assert!(out.starts_with("Updated"), "{out}");
        assert!(out.contains("1 station registration(s) removed"), "{out}");
        let ports = s.registry.station_ports();
        assert_eq!(ports.len(), 1);
        assert_eq!(ports[0].host, "beta");
    }

    #[test]
    fn status_toggles_and_delete_restores_filesystem() {
        let (tmp, s) = shared();
        let before = snapshot(tmp.path());
        addsolver(
            &s,
            &job(
                &tmp.path().join("scratch"),
                &registration("pw", "localhost\n"),
            ),
        );
        let key: SolverKey = "MISC:ECHO-1".parse().unwrap();
        s.registry
            .set_station_port("localhost", &key, 4000)
            .unwrap();
        let act = |action: &str, pw: &str| {
            status(
                &s,
                &job(
                    &tmp.path().join("scratch"),
                    &[
                        ("solver_type", "MISC"),
                        ("solver_id", "echo-1"),
                        ("password", pw),
                        ("action", action),
                    ],
                ),
            )
        };
        assert!(act("disable", "wrong").starts_with("Refused"));
        assert!(s.registry.is_listed(&key));
        assert_eq!(act("disable", "pw"), "MISC:ECHO-1 is disabled.\n");
        assert!(!s.registry.is_listed(&key));
        assert!(s.registry.exists(&key));
        assert_eq!(act("enable", "pw"), "MISC:ECHO-1 is enabled.\n");
        assert!(s.registry.is_listed(&key));
        assert!(act("delete", "pw").contains("deleted"));
        assert!(!s.registry.exists(&key));
        assert!(s.registry.station_ports().is_empty());
        assert_eq!(snapshot(tmp.path()), before);
        assert!(act("enable", "pw").contains("no solver"));
    }

    #[test]
    fn status_refuses_admin_solvers() {
        let (tmp, s) = shared();
        let out = status(
            &s,
            &job(
                &tmp.path().join("scratch"),
                &[
                    ("solver_type", "admin"),
                    ("solver_id", "help"),
                    ("action", "delete"),
                ],
            ),
        );
        assert!(out.contains("built-in"), "{out}");
    }
}
