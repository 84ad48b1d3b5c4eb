use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Identity of a registered solver: `TYPE:ID`, always stored uppercased.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SolverKey {
    solver_type: String,
    id: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid solver key `{0}` (expected TYPE:ID)")]
pub struct KeyError(pub String);

impl SolverKey {
    pub fn new(solver_type: &str, id: &str) -> Result<Self, KeyError> {
        let t = solver_type.trim();
        let i = id.trim();
        // keys name directories, so path separators and dot-names are out
        let ok = |s: &str| {
            !s.is_empty()
                && !s.starts_with('.')
                && !s
                    .chars()
                    .any(|c| c == ':' || c == '/' || c.is_whitespace() || c.is_control())
        };
        if !ok(t) || !ok(i) {
            return Err(KeyError(format!("{solver_type}:{id}")));
        }
        Ok(SolverKey {
            solver_type: t.to_ascii_uppercase(),
            id: i.to_ascii_uppercase(),
        })
    }

    pub fn solver_type(&self) -> &str {
        &self.solver_type
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_admin(&self) -> bool {
        self.solver_type == "ADMIN"
    }
}

impl fmt::Display for SolverKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.solver_type, self.id)
    }
}

impl FromStr for SolverKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().split_once(':') {
            Some((t, i)) => SolverKey::new(t, i).map_err(|_| KeyError(s.to_string())),
            None => Err(KeyError(s.to_string())),
        }
    }
}
