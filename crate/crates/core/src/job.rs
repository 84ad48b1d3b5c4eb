use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};

/// Where a submission entered the broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interface {
    Socket,
    Web,
    Kestrel,
    Local,
}

impl Interface {
    pub const SPOOLED: [Interface; 3] = [Interface::Socket, Interface::Web, Interface::Kestrel];

    pub fn tag(self) -> &'static str {
        match self {
            Interface::Socket => "SOCKET",
            Interface::Web => "WEB",
            Interface::Kestrel => "KESTREL",
            Interface::Local => "LOCAL",
        }
    }

    /// Name of the spool directory the interface deposits into.
    pub fn spool_name(self) -> Option<&'static str> {
        match self {
            Interface::Local => None,
            other => Some(other.tag()),
        }
    }
}

impl fmt::Display for Interface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Interface {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SOCKET" => Ok(Interface::Socket),
            "WEB" => Ok(Interface::Web),
            "KESTREL" => Ok(Interface::Kestrel),
            "LOCAL" => Ok(Interface::Local),
            _ => Err(format!("unknown interface `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum JobState {
    Received,
    Parsed,
    Queued,
    Executing,
    Done,
    Failed,
}

impl JobState {
    /// States only move forward; any unfinished job may fail.
    pub fn can_advance_to(self, next: JobState) -> bool {
        match next {
            JobState::Failed => self != JobState::Done && self != JobState::Failed,
            _ => self != JobState::Failed && next > self,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Job {
    pub number: u64,
    pub interface: Interface,
    pub sender_tag: String,
    pub solver_key: String,
    pub state: JobState,
    pub password: String,
    pub received: DateTime<Utc>,
    pub started: Option<DateTime<Utc>>,
    pub finished: Option<DateTime<Utc>>,
}

impl Job {
    pub fn new(number: u64, interface: Interface, received: DateTime<Utc>) -> Self {
        Job {
            number,
            interface,
            sender_tag: String::new(),
            solver_key: String::new(),
            state: JobState::Received,
            password: String::new(),
            received,
            started: None,
            finished: None,
        }
    }

    /// Moves to `next`, refusing backward transitions.
    pub fn advance(&mut self, next: JobState) -> bool {
        if self.state.can_advance_to(next) {
            self.state = next;
            true
        } else {
            false
        }
    }
}
