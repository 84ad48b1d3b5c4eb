//! Fixed-width rows of the master database.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};

pub const RECORD_LEN: usize = 256;

const W_NUMBER: usize = 10;
const W_KEY: usize = 32;
const W_SENDER: usize = 64;
const W_RECEIVED: usize = 20;
const W_FINISHED: usize = 20;
const W_DISPOSITION: usize = 8;
const W_COMMENT: usize = 101;

const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// A row left by the cleaner where no record was ever written.
pub fn blank_row() -> [u8; RECORD_LEN] {
    let mut row = [b' '; RECORD_LEN];
    row[RECORD_LEN - 1] = b'\n';
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Disposition {
    Done,
    Failed,
    Rejected,
}

impl fmt::Display for Disposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Disposition::Done => "DONE",
            Disposition::Failed => "FAILED",
            Disposition::Rejected => "REJECTED",
        })
    }
}

impl FromStr for Disposition {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "DONE" => Ok(Disposition::Done),
            "FAILED" => Ok(Disposition::Failed),
            "REJECTED" => Ok(Disposition::Rejected),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterRecord {
    pub number: u64,
    pub solver_key: String,
    pub sender_tag: String,
    pub received: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub disposition: Disposition,
    /// Starts with the interface tag.
    pub comment: String,
}

impl MasterRecord {
    /// The record as it will read back: text fields cleaned of control
    /// characters, truncated to their widths and stripped of trailing
    /// spaces, timestamps cut to whole seconds.
    pub fn normalized(&self) -> MasterRecord {
        MasterRecord {
            number: self.number,
            solver_key: fit(&self.solver_key, W_KEY),
            sender_tag: fit(&self.sender_tag, W_SENDER),
            received: whole_seconds(self.received),
            finished: self.finished.map(whole_seconds),
            disposition: self.disposition,
            comment: fit(&self.comment, W_COMMENT),
        }
    }

    pub fn interface_tag(&self) -> &str {
        self.comment.split_whitespace().next().unwrap_or("")
    }

    pub fn to_bytes(&self) -> [u8; RECORD_LEN] {
        let r = self.normalized();
        let mut row = [b' '; RECORD_LEN];
        let mut at = 0;
        let mut put = |text: &str, width: usize| {
            let bytes = text.as_bytes();
            let n = bytes.len().min(width);
            row[at..at + n].copy_from_slice(&bytes[..n]);
            at += width;
        };
        put(&r.number.to_string(), W_NUMBER);
        put(&r.solver_key, W_KEY);
        put(&r.sender_tag, W_SENDER);
        put(&r.received.format(TIME_FORMAT).to_string(), W_RECEIVED);
        let finished = r
            .finished
            .map(|t| t.format(TIME_FORMAT).to_string())
            .unwrap_or_default();
        put(&finished, W_FINISHED);
        put(&r.disposition.to_string(), W_DISPOSITION);
        put(&r.comment, W_COMMENT);
        row[RECORD_LEN - 1] = b'\n';
        row
    }

    /// Parses one row; blank or damaged rows give `None`.
    pub fn from_bytes(row: &[u8]) -> Option<MasterRecord> {
        if row.len() != RECORD_LEN || row[RECORD_LEN - 1] != b'\n' {
            return None;
        }
        let text = std::str::from_utf8(&row[..RECORD_LEN - 1]).ok()?;
        let mut at = 0;
        let mut take = |width: usize| {
            let field = text.get(at..at + width);
            at += width;
            field.map(|f| f.trim_end_matches(' '))
        };
        let number = take(W_NUMBER)?.parse::<u64>().ok().filter(|&n| n > 0)?;
        let solver_key = take(W_KEY)?.to_string();
        let sender_tag = take(W_SENDER)?.to_string();
        let received = parse_time(take(W_RECEIVED)?)?;
        let finished = match take(W_FINISHED)? {
            "" => None,
            t => Some(parse_time(t)?),
        };
        let disposition = take(W_DISPOSITION)?.parse().ok()?;
        let comment = take(W_COMMENT)?.to_string();
        Some(MasterRecord {
            number,
            solver_key,
            sender_tag,
            received,
            finished,
            disposition,
            comment,
        })
    }
}

fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .ok()
        .map(|t| t.and_utc())
}

fn whole_seconds(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp(t.timestamp(), 0).unwrap_or(t)
}

fn fit(text: &str, width: usize) -> String {
    let mut out = String::new();
    for c in text.chars() {
        let c = if c.is_control() { ' ' } else { c };
        if out.len() + c.len_utf8() > width {
            break;
        }
        out.push(c);
    }
    out.truncate(out.trim_end_matches(' ').len());
    out
}

/// Criteria for scanning the master database. Empty fields match anything.
#[derive(Debug, Clone, Default)]
pub struct MasterFilter {
    pub solver: Option<String>,
    /// Matches any sender tag containing this text.
    pub sender: Option<String>,
    pub received_from: Option<DateTime<Utc>>,
    pub received_to: Option<DateTime<Utc>>,
}

impl MasterFilter {
    pub fn matches(&self, r: &MasterRecord) -> bool {
        self.solver
            .as_ref()
            .is_none_or(|s| s.eq_ignore_ascii_case(&r.solver_key))
            && self
                .sender
                .as_ref()
                .is_none_or(|s| r.sender_tag.contains(s.as_str()))
            && self.received_from.is_none_or(|t| r.received >= t)
            && self.received_to.is_none_or(|t| r.received < t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn sample() -> MasterRecord {
        MasterRecord {
            number: 7773,
            solver_key: "ADMIN:HELP".into(),
            sender_tag: "192.168.1.9".into(),
            received: Utc.with_ymd_and_hms(1999, 8, 8, 16, 38, 0).unwrap(),
            finished: Some(Utc.with_ymd_and_hms(1999, 8, 8, 16, 38, 5).unwrap()),
            disposition: Disposition::Done,
            comment: "SOCKET help".into(),
        }
    }

    #[test]
    fn layout_is_fixed() {
        let row = sample().to_bytes();
        assert_eq!(row.len(), 256);
        assert_eq!(row[255], b'\n');
        assert_eq!(&row[..10], b"7773      ");
        assert_eq!(&row[10..20], b"ADMIN:HELP");
        assert_eq!(&row[106..125], b"1999-08-08 16:38:00");
        assert_eq!(&row[146..150], b"DONE");
        assert_eq!(&row[154..165], b"SOCKET help");
        assert_eq!(MasterRecord::from_bytes(&row), Some(sample()));
        assert_eq!(sample().interface_tag(), "SOCKET");
    }

    #[test]
    fn oversized_values_truncate() {
        let mut r = sample();
        r.sender_tag = "é".repeat(40);
        r.comment = "line one\nline two".into();
        let back = MasterRecord::from_bytes(&r.to_bytes()).unwrap();
        assert_eq!(back.sender_tag, "é".repeat(32));
        assert_eq!(back.comment, "line one line two");
    }

    #[test]
    fn blank_and_garbage_rows_are_skipped() {
        assert_eq!(MasterRecord::from_bytes(&blank_row()), None);
        assert_eq!(MasterRecord::from_bytes(&[b' '; 256]), None);
        assert_eq!(MasterRecord::from_bytes(&[0u8; 256]), None);
    }

    fn arb_text(max: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec(any::<char>(), 0..max).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn rows_round_trip(
            number in 1u64..=9_999_999_999,
            key in arb_text(40),
            sender in arb_text(80),
            secs in 0i64..4_000_000_000,
            fin in proptest::option::of(0i64..4_000_000_000),
            disp in prop_oneof![Just(Disposition::Done), Just(Disposition::Failed), Just(Disposition::Rejected)],
            comment in arb_text(120),
        ) {
            let r = MasterRecord {
                number,
                solver_key: key,
                sender_tag: sender,
                received: DateTime::from_timestamp(secs, 0).unwrap(),
                finished: fin.map(|f| DateTime::from_timestamp(f, 0).unwrap()),
                disposition: disp,
                comment,
            };
            let row = r.to_bytes();
            prop_assert_eq!(row.len(), RECORD_LEN);
            prop_assert_eq!(row[RECORD_LEN - 1], b'\n');
            let back = MasterRecord::from_bytes(&row).unwrap();
            prop_assert_eq!(&back, &r.normalized());
            prop_assert_eq!(back.to_bytes(), row);
        }
    }
}
