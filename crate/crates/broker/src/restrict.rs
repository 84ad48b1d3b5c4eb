//! Per-solver usage limits over sliding windows.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Max,
    MaxAnyOneUser,
    MaxAnyOneDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Window {
    Minute,
    Hour,
    Day,
    /// Thirty days.
    Month,
}

impl Window {
    pub fn length(self) -> Duration {
        match self {
            Window::Minute => Duration::minutes(1),
            Window::Hour => Duration::hours(1),
            Window::Day => Duration::days(1),
            Window::Month => Duration::days(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RestrictionRule {
    pub scope: Scope,
    pub window: Window,
    pub limit: u32,
}

impl fmt::Display for RestrictionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scope = match self.scope {
            Scope::Max => "#max",
            Scope::MaxAnyOneUser => "#max_any_one_user",
            Scope::MaxAnyOneDomain => "#max_any_one_domain",
        };
        let window = match self.window {
            Window::Minute => "minute",
            Window::Hour => "hour",
            Window::Day => "day",
            Window::Month => "month",
        };
        write!(f, "{scope} {window} {}", self.limit)
    }
}

impl FromStr for RestrictionRule {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let [scope, window, limit] = words[..] else {
            return Err(format!("`{line}`: expected `<scope> <window> <limit>`"));
        };
        let scope = match scope.to_ascii_lowercase().as_str() {
            "#max" => Scope::Max,
            "#max_any_one_user" => Scope::MaxAnyOneUser,
            "#max_any_one_domain" => Scope::MaxAnyOneDomain,
            _ => return Err(format!("`{line}`: unknown scope `{scope}`")),
        };
        let window = match window.to_ascii_lowercase().as_str() {
            "minute" => Window::Minute,
            "hour" => Window::Hour,
            "day" => Window::Day,
            "month" => Window::Month,
            _ => return Err(format!("`{line}`: unknown window `{window}`")),
        };
        let limit = limit
            .parse::<u32>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("`{line}`: limit must be a positive integer"))?;
        Ok(RestrictionRule {
            scope,
            window,
            limit,
        })
    }
}

/// Parses a restrictions file; blank lines are skipped.
pub fn parse_rules(text: &str) -> Result<Vec<RestrictionRule>, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect()
}

/// The address part of a sender tag, without `WEB_USER` style prefixes.
pub fn sender_address(sender_tag: &str) -> &str {
    sender_tag.split_whitespace().last().unwrap_or("")
}

/// Text after the last `@`, or the whole host token.
pub fn sender_domain(sender_tag: &str) -> String {
    let addr = sender_address(sender_tag);
    match addr.rsplit_once('@') {
        Some((_, domain)) => domain.to_ascii_lowercase(),
        None => addr.to_ascii_lowercase(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny(RestrictionRule),
}

/// Accepted jobs per solver, newest last.
#[derive(Debug, Default)]
pub struct History {
    accepted: HashMap<String, VecDeque<(DateTime<Utc>, String)>>,
}

impl History {
    pub fn record(&mut self, solver_key: &str, sender_tag: &str, at: DateTime<Utc>) {
        self.accepted
            .entry(solver_key.to_string())
            .or_default()
            .push_back((at, sender_address(sender_tag).to_ascii_lowercase()));
    }

    /// Checks the rules and, when allowed, records the job as accepted.
    pub fn admit(
        &mut self,
        rules: &[RestrictionRule],
        solver_key: &str,
        sender_tag: &str,
        now: DateTime<Utc>,
    ) -> Verdict {
        let verdict = self.check(rules, solver_key, sender_tag, now);
        if verdict == Verdict::Allow {
            self.record(solver_key, sender_tag, now);
        }
        verdict
    }

    pub fn check(
        &mut self,
        rules: &[RestrictionRule],
        solver_key: &str,
        sender_tag: &str,
        now: DateTime<Utc>,
    ) -> Verdict {
        let Some(jobs) = self.accepted.get_mut(solver_key) else {
            return Verdict::Allow;
        };
        let horizon = now - Window::Month.length();
        while jobs.front().is_some_and(|(t, _)| *t <= horizon) {
            jobs.pop_front();
        }
        let user = sender_address(sender_tag).to_ascii_lowercase();
        let domain = sender_domain(sender_tag);
        for rule in rules {
            let since = now - rule.window.length();
            let count = jobs
                .iter()
                .filter(|(t, _)| *t > since)
                .filter(|(_, who)| match rule.scope {
                    Scope::Max => true,
                    Scope::MaxAnyOneUser => *who == user,
                    Scope::MaxAnyOneDomain => sender_domain(who) == domain,
                })
                .count();
            if count >= rule.limit as usize {
                return Verdict::Deny(rule.clone());
            }
        }
        Verdict::Allow
    }
}
