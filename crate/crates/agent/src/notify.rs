//! Messages for the solver's contact address.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use chrono::Utc;

pub trait Notifier: Send + Sync {
    fn notify(&self, contact: &str, subject: &str, body: &str);
}

/// Appends one line per message to a file instead of sending mail.
#[derive(Debug)]
pub struct LogNotifier {
    path: PathBuf,
    lock: Mutex<()>,
}

impl LogNotifier {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        LogNotifier {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }
}

impl Notifier for LogNotifier {
    fn notify(&self, contact: &str, subject: &str, body: &str) {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let body = body.trim().replace('\n', " | ");
        let line = format!(
            "{} to={contact} subject={subject:?} {body}\n",
            Utc::now().format("%Y-%m-%dT%H:%M:%SZ")
        );
        let result = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = result {
            log::error!("cannot write {}: {e}", self.path.display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_per_message() {
        let dir = tempfile::tempdir().unwrap();
        let n = LogNotifier::new(dir.path().join("notifications.log"));
        n.notify("a@b.org", "job 1", "line one\nline two\n");
        n.notify("a@b.org", "job 2", "x");
        let text = std::fs::read_to_string(dir.path().join("notifications.log")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("to=a@b.org subject=\"job 1\" line one | line two"));
    }
}
