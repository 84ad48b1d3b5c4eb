//! Solver registrations under `lib/solvers`, the public solver list and the
//! station/port table that agents fill in when they register.

use std::fs;
use std::io;
use std::net::{IpAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::distributions::Alphanumeric;
use rand::Rng;
use sha2::{Digest, Sha256};
use solverhub_core::store::{write_atomic, Store};
use solverhub_core::token::{parse_token_config, TokenConfig};
use solverhub_core::SolverKey;

use crate::restrict::{parse_rules, RestrictionRule};
use crate::BrokerError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Station {
    pub host: String,
    pub capacity: u32,
}

/// Parses `host [max_jobs]` lines; a missing count means 1.
pub fn parse_stations(text: &str) -> Result<Vec<Station>, String> {
    let mut stations: Vec<Station> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let words: Vec<&str> = line.split_whitespace().collect();
        let (host, capacity) = match words[..] {
            [host] => (host, 1),
            [host, n] => (
                host,
                n.parse::<u32>()
                    .ok()
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| format!("station `{line}`: job count must be at least 1"))?,
            ),
            _ => return Err(format!("station `{line}`: expected `host [max_jobs]`")),
        };
        if host.contains('/') {
            return Err(format!("station `{line}`: bad host name"));
        }
        if stations.iter().any(|s| s.host.eq_ignore_ascii_case(host)) {
            return Err(format!("station `{host}` is listed twice"));
        }
        stations.push(Station {
            host: host.to_string(),
            capacity,
        });
    }
    Ok(stations)
}

fn format_stations(stations: &[Station]) -> String {
    stations
        .iter()
        .map(|s| format!("{} {}\n", s.host, s.capacity))
        .collect()
}

/// Everything stored for one solver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub key: SolverKey,
    pub name: String,
    /// Salted hash; empty for built-in solvers, which cannot be modified.
    pub password_hash: String,
    pub contact: String,
    pub stations: Vec<Station>,
    pub tokens: String,
    pub restrictions: Vec<RestrictionRule>,
    pub email_help: Option<String>,
    pub tool_help: Option<String>,
    pub web_help: Option<String>,
    pub web_samples: Option<String>,
    pub abstract_text: Option<String>,
    pub background_url: Option<String>,
    /// Built-in driver name for admin solvers.
    pub solve: Option<String>,
}

const OPTIONAL_FILES: [&str; 7] = [
    "email-help",
    "tool-help",
    "web-help",
    "web-samples",
    "abstract",
    "background-url",
    "SOLVE",
];

impl Registration {
    pub fn token_config(&self) -> Result<TokenConfig, BrokerError> {
        parse_token_config(self.tokens.as_bytes()).map_err(|e| {
            BrokerError::Registry(format!("{}: bad token configuration: {e}", self.key))
        })
    }

    fn optional(&self) -> [(&'static str, &Option<String>); 7] {
        [
            (OPTIONAL_FILES[0], &self.email_help),
            (OPTIONAL_FILES[1], &self.tool_help),
            (OPTIONAL_FILES[2], &self.web_help),
            (OPTIONAL_FILES[3], &self.web_samples),
            (OPTIONAL_FILES[4], &self.abstract_text),
            (OPTIONAL_FILES[5], &self.background_url),
            (OPTIONAL_FILES[6], &self.solve),
        ]
    }

    fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("NAME"), format!("{}\n", self.name))?;
        if !self.password_hash.is_empty() {
            fs::write(dir.join("PASSWORD"), format!("{}\n", self.password_hash))?;
        }
        fs::write(dir.join("CONTACT"), format!("{}\n", self.contact))?;
        fs::write(dir.join("STATIONS"), format_stations(&self.stations))?;
        fs::write(dir.join("TOKENS"), &self.tokens)?;
        let rules: String = self.restrictions.iter().map(|r| format!("{r}\n")).collect();
        fs::write(dir.join("RESTRICTIONS"), rules)?;
        for (file, value) in self.optional() {
            if let Some(text) = value {
                fs::write(dir.join(file), text)?;
            }
        }
        Ok(())
    }

    fn read_from(key: SolverKey, dir: &Path) -> Result<Registration, BrokerError> {
        let read = |name: &str| -> Result<Option<String>, BrokerError> {
            match fs::read_to_string(dir.join(name)) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(BrokerError::Registry(format!(
                    "{}/{name}: {e}",
                    dir.display()
                ))),
            }
        };
        let line = |name: &str| -> Result<String, BrokerError> {
            Ok(read(name)?.unwrap_or_default().trim().to_string())
        };
        let bad = |what: String| BrokerError::Registry(format!("{key}: {what}"));
        let stations = parse_stations(&read("STATIONS")?.unwrap_or_default()).map_err(bad)?;
        let restrictions = parse_rules(&read("RESTRICTIONS")?.unwrap_or_default())
            .map_err(|e| BrokerError::Registry(format!("{key}: {e}")))?;
        Ok(Registration {
            name: line("NAME")?,
            password_hash: line("PASSWORD")?,
            contact: line("CONTACT")?,
            stations,
            tokens: read("TOKENS")?.unwrap_or_default(),
            restrictions,
            email_help: read("email-help")?,
            tool_help: read("tool-help")?,
            web_help: read("web-help")?,
            web_samples: read("web-samples")?,
            abstract_text: read("abstract")?,
            background_url: read("background-url")?.map(|s| s.trim().to_string()),
            solve: read("SOLVE")?.map(|s| s.trim().to_string()),
            key,
        })
    }
}

pub fn hash_password(password: &str) -> String {
    let salt: String = rand::thread_rng()
        .sample_iter(&Alphanumeric)
        .take(16)
        .map(char::from)
        .collect();
    format!("sha256${salt}${}", digest(&salt, password))
}

pub fn verify_password(stored: &str, password: &str) -> bool {
    let mut parts = stored.trim().splitn(3, '$');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("sha256"), Some(salt), Some(hex)) => {
            let got = digest(salt, password);
            // compare without an early exit
            got.len() == hex.len()
                && got
                    .bytes()
                    .zip(hex.bytes())
                    .fold(0u8, |acc, (a, b)| acc | (a ^ b))
                    == 0
        }
        _ => false,
    }
}

fn digest(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(b"$");
    h.update(password.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One `host:TYPE:ID:port` line of the station/port table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StationPort {
    pub host: String,
    pub key: SolverKey,
    pub port: u16,
}

impl StationPort {
    fn parse(line: &str) -> Option<StationPort> {
        let mut parts = line.trim().rsplitn(4, ':');
        let port = parts.next()?.parse().ok()?;
        let id = parts.next()?;
        let ty = parts.next()?;
        let host = parts.next()?;
        Some(StationPort {
            host: host.to_string(),
            key: SolverKey::new(ty, id).ok()?,
            port,
        })
    }

    pub fn address(&self) -> String {
        if self.host.contains(':') {
            format!("[{}]:{}", self.host, self.port)
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }
}

/// A station host resolves to the given peer address.
pub fn host_matches(host: &str, peer: IpAddr) -> bool {
    if host.parse::<IpAddr>().ok() == Some(peer) {
        return true;
    }
    match (host, 0).to_socket_addrs() {
        Ok(addrs) => addrs.into_iter().any(|a| a.ip() == peer),
        Err(_) => false,
    }
}

/// Serialized access to the solver library files.
#[derive(Debug)]
pub struct Registry {
    lib: PathBuf,
    solvers: PathBuf,
    lock: Mutex<()>,
}

impl Registry {
    pub fn new(store: &Store) -> Registry {
        Registry {
            lib: store.lib_dir(),
            solvers: store.solvers_dir(),
            lock: Mutex::new(()),
        }
    }

    /// Holds the registry lock for a multi-step update.
    pub fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn solver_dir(&self, key: &SolverKey) -> PathBuf {
        self.solvers.join(key.to_string())
    }

    pub fn admin_dir(&self) -> PathBuf {
        self.lib.join("admin")
    }

    pub fn exists(&self, key: &SolverKey) -> bool {
        self.solver_dir(key).is_dir()
    }

    pub fn load(&self, key: &SolverKey) -> Result<Option<Registration>, BrokerError> {
        let dir = self.solver_dir(key);
        if !dir.is_dir() {
            return Ok(None);
        }
        Registration::read_from(key.clone(), &dir).map(Some)
    }

    /// Replaces the stored registration as a whole.
    pub fn save(&self, reg: &Registration) -> Result<(), BrokerError> {
        let dir = self.solver_dir(&reg.key);
        let staging = self.solvers.join(format!(".{}.new", reg.key));
        let old = self.solvers.join(format!(".{}.old", reg.key));
        let io = |e: io::Error| BrokerError::Registry(format!("{}: {e}", reg.key));
        let _ = fs::remove_dir_all(&staging);
        let _ = fs::remove_dir_all(&old);
        reg.write_to(&staging).map_err(io)?;
        if dir.exists() {
            fs::rename(&dir, &old).map_err(io)?;
        }
        fs::rename(&staging, &dir).map_err(io)?;
        let _ = fs::remove_dir_all(&old);
        Ok(())
    }

    pub fn remove(&self, key: &SolverKey) -> Result<(), BrokerError> {
        let dir = self.solver_dir(key);
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(BrokerError::Registry(format!("{}: {e}", dir.display()))),
        }
    }

    pub fn solver_list_path(&self) -> PathBuf {
        self.lib.join("solver_list")
    }

    fn ports_path(&self) -> PathBuf {
        self.lib.join("station_type_port")
    }

    fn read_lines(path: &Path) -> Vec<String> {
        fs::read_to_string(path)
            .unwrap_or_default()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    }

    fn write_lines(path: &Path, lines: &[String]) -> Result<(), BrokerError> {
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        write_atomic(path, text.as_bytes()).map_err(|e| BrokerError::Registry(e.to_string()))
    }

    /// `(name, key)` pairs of the publicly listed solvers.
    pub fn solver_list(&self) -> Vec<(String, String)> {
        Self::read_lines(&self.solver_list_path())
            .iter()
            .filter_map(|l| l.rsplit_once('='))
            .map(|(n, k)| (n.to_string(), k.trim().to_string()))
            .collect()
    }

    pub fn is_listed(&self, key: &SolverKey) -> bool {
        let key = key.to_string();
        self.solver_list().iter().any(|(_, k)| *k == key)
    }

    /// Adds, renames or drops the solver's `Name=TYPE:ID` line.
    pub fn set_listed(&self, key: &SolverKey, name: &str, listed: bool) -> Result<(), BrokerError> {
        let path = self.solver_list_path();
        let key = key.to_string();
        let mut lines = Self::read_lines(&path);
        let suffix = format!("={key}");
        let at = lines.iter().position(|l| l.trim_end().ends_with(&suffix));
        match (at, listed) {
            (Some(i), true) => lines[i] = format!("{name}={key}"),
            (None, true) => lines.push(format!("{name}={key}")),
            (Some(i), false) => {
                lines.remove(i);
            }
            (None, false) => return Ok(()),
        }
        Self::write_lines(&path, &lines)
    }

    pub fn station_ports(&self) -> Vec<StationPort> {
        Self::read_lines(&self.ports_path())
            .iter()
            .filter_map(|l| StationPort::parse(l))
            .collect()
    }

    /// Records the agent port for `host` and `key`, replacing an older entry.
    pub fn set_station_port(
        &self,
        host: &str,
        key: &SolverKey,
        port: u16,
    ) -> Result<(), BrokerError> {
        let path = self.ports_path();
        let mut lines = Self::read_lines(&path);
        lines.retain(|l| {
            StationPort::parse(l)
                .is_none_or(|sp| !(sp.host.eq_ignore_ascii_case(host) && sp.key == *key))
        });
        lines.push(format!("{host}:{key}:{port}"));
        Self::write_lines(&path, &lines)
    }

    /// Drops port entries for `key` whose host is not in `keep`.
    pub fn prune_station_ports(
        &self,
        key: &SolverKey,
        keep: &[Station],
    ) -> Result<usize, BrokerError> {
        let path = self.ports_path();
        let mut lines = Self::read_lines(&path);
        let before = lines.len();
        lines.retain(|l| match StationPort::parse(l) {
            Some(sp) if sp.key == *key => {
                keep.iter().any(|s| s.host.eq_ignore_ascii_case(&sp.host))
            }
            _ => true,
        });
        let removed = before - lines.len();
        if removed > 0 {
            Self::write_lines(&path, &lines)?;
        }
        Ok(removed)
    }
}

/// Solver categories, read from `Full Name|abbrev` lines.
pub fn read_categories(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let (full, abbrev) = l.rsplit_once('|')?;
            Some((full.trim().to_string(), abbrev.trim().to_ascii_uppercase()))
        })
        .collect()
}

pub fn category_listing(categories: &[(String, String)]) -> String {
    let mut out = String::from("Available solver categories:\n");
    for (full, abbrev) in categories {
        out.push_str(&format!("  {abbrev:<12} {full}\n"));
    }
    out
}

/// Eight lowercase alphanumerics.
pub fn job_password() -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = rand::thread_rng();
    (0..8)
        .map(|_| char::from(CHARS[rng.gen_range(0..CHARS.len())]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> (tempfile::TempDir, Store, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path()).unwrap();
        let reg = Registry::new(&store);
        (dir, store, reg)
    }

    fn sample(key: &str) -> Registration {
        Registration {
            key: key.parse().unwrap(),
            name: "Mine".into(),
            password_hash: hash_password("secret"),
            contact: "me@example.org".into(),
            stations: parse_stations("harkonnen.example.org 3\nfire\n").unwrap(),
            tokens: "File::begin.a:end.a:A\n".into(),
            restrictions: parse_rules("#max hour 20").unwrap(),
            email_help: Some("mail me\n".into()),
            tool_help: None,
            web_help: None,
            web_samples: None,
            abstract_text: None,
            background_url: Some("http://example.org".into()),
            solve: None,
        }
    }

    #[test]
    fn stations_parse() {
        let s = parse_stations("harkonnen.mcs.anl.gov 3\n\nfire.mcs.anl.gov\n").unwrap();
        assert_eq!(s[0].capacity, 3);
        assert_eq!(s[1].capacity, 1);
        assert!(parse_stations("a 0").is_err());
        assert!(parse_stations("a 1\nA 2").is_err());
        assert!(parse_stations("a 1 2").is_err());
    }

    #[test]
    fn passwords_are_salted() {
        let a = hash_password("pw");
        let b = hash_password("pw");
        assert_ne!(a, b);
        assert!(verify_password(&a, "pw"));
        assert!(!verify_password(&a, "pW"));
        assert!(!verify_password("pw", "pw"));
        assert!(!verify_password("", ""));
    }

    #[test]
    fn registration_round_trips() {
        let (_d, _s, reg) = registry();
        let r = sample("misc:mine");
        reg.save(&r).unwrap();
        assert_eq!(reg.load(&r.key).unwrap().unwrap(), r);
        let mut r2 = r.clone();
        r2.email_help = None;
        r2.name = "Renamed".into();
        reg.save(&r2).unwrap();
        assert_eq!(reg.load(&r.key).unwrap().unwrap(), r2);
        reg.remove(&r.key).unwrap();
        assert!(reg.load(&r.key).unwrap().is_none());
    }

    #[test]
    fn solver_list_edits() {
        let (_d, _s, reg) = registry();
        let k: SolverKey = "BCO:TRON-AMPL".parse().unwrap();
        reg.set_listed(&k, "TRON (AMPL input)", true).unwrap();
        assert_eq!(
            fs::read_to_string(reg.solver_list_path()).unwrap(),
            "TRON (AMPL input)=BCO:TRON-AMPL\n"
        );
        assert!(reg.is_listed(&k));
        reg.set_listed(&k, "TRON", true).unwrap();
        assert_eq!(
            reg.solver_list(),
            vec![("TRON".into(), "BCO:TRON-AMPL".into())]
        );
        reg.set_listed(&k, "TRON", false).unwrap();
        assert_eq!(fs::read_to_string(reg.solver_list_path()).unwrap(), "");
    }

    #[test]
    fn station_ports_replace_per_host_and_key() {
        let (_d, _s, reg) = registry();
        let k: SolverKey = "GAMS:BDMLP".parse().unwrap();
        let other: SolverKey = "NLP:X".parse().unwrap();
        reg.set_station_port("fire.mcs.anl.gov", &k, 4001).unwrap();
        reg.set_station_port("fire.mcs.anl.gov", &k, 4002).unwrap();
        reg.set_station_port("fire.mcs.anl.gov", &other, 4003)
            .unwrap();
        reg.set_station_port("::1", &k, 4004).unwrap();
        let ports = reg.station_ports();
        assert_eq!(ports.len(), 3);
        assert_eq!(ports[0].port, 4002);
        assert_eq!(ports[2].address(), "[::1]:4004");
        let removed = reg
            .prune_station_ports(&k, &parse_stations("fire.mcs.anl.gov").unwrap())
            .unwrap();
        assert_eq!(removed, 1);
        assert_eq!(reg.prune_station_ports(&k, &[]).unwrap(), 1);
        assert_eq!(reg.station_ports().len(), 1);
    }

    #[test]
    fn categories_and_passwords() {
        let dir = tempfile::tempdir().unwrap();
        let tree = dir.path().join("tree");
        fs::write(
            &tree,
            "Nonlinear Programming|nlp\n# comment\nBound Constrained|BCO\n",
        )
        .unwrap();
        let cats = read_categories(&tree);
        assert_eq!(cats[0], ("Nonlinear Programming".into(), "NLP".into()));
        assert!(category_listing(&cats).contains("BCO"));
        let p = job_password();
        assert_eq!(p.len(), 8);
        assert!(p
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
        assert!(host_matches("127.0.0.1", "127.0.0.1".parse().unwrap()));
        assert!(host_matches("localhost", "127.0.0.1".parse().unwrap()));
        assert!(!host_matches("127.0.0.2", "127.0.0.1".parse().unwrap()));
    }
}
