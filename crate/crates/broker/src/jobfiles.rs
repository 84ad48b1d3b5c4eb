//! Bookkeeping files inside `jobs/job.<n>/`.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use solverhub_core::store::{Disposition, MasterRecord, Store, DONE};
use solverhub_core::wire::END_STANDARD_OUT;

pub const RECEIVED: &str = "job.received";
pub const INTERFACE: &str = "job.interface";
pub const ADDRESS: &str = "job.address";
pub const TYPE: &str = "job.type";
pub const PASSWORD: &str = "job.password";
pub const OUT: &str = "job.out";
pub const STATION: &str = "job.station";
pub const RESULTS: &str = "job.results";
/// Solver named in a submission that was rerouted to the help solver.
pub const HELP_FOR: &str = "job.help";

pub fn read_text(dir: &Path, name: &str) -> Option<String> {
    fs::read_to_string(dir.join(name))
        .ok()
        .map(|s| s.trim().to_string())
}

pub fn append_out(dir: &Path, text: &str) {
    let path = dir.join(OUT);
    let result = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(text.as_bytes()));
    if let Err(e) = result {
        log::error!("cannot append to {}: {e}", path.display());
    }
}

pub fn append_out_bytes(dir: &Path, data: &[u8]) -> io::Result<()> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(OUT))?
        .write_all(data)
}

fn received_at(dir: &Path) -> DateTime<Utc> {
    fs::metadata(dir.join(RECEIVED))
        .and_then(|m| m.modified())
        .map(DateTime::<Utc>::from)
        .unwrap_or_else(|_| Utc::now())
}

/// Finishes a job: results (if the job left none, `fallback` is written),
/// the master record, the end marker in job.out, then DONE. Does nothing
/// for a job that is already DONE.
pub fn finalize(store: &Store, number: u64, disposition: Disposition, fallback: &str, note: &str) {
    let dir = store.job_dir(number);
    if dir.join(DONE).exists() {
        return;
    }
    let results = dir.join(RESULTS);
    if !results.exists() {
        if let Err(e) = store.write_atomic(&results, fallback.as_bytes()) {
            log::error!("job {number}: cannot write results: {e}");
        }
    }
    let interface = read_text(&dir, INTERFACE).unwrap_or_else(|| "LOCAL".into());
    let record = MasterRecord {
        number,
        solver_key: read_text(&dir, TYPE).unwrap_or_default(),
        sender_tag: read_text(&dir, ADDRESS).unwrap_or_default(),
        received: received_at(&dir),
        finished: Some(Utc::now()),
        disposition,
        comment: if note.is_empty() {
            interface
        } else {
            format!("{interface} {note}")
        },
    };
    if let Err(e) = store.write_master_record(&record) {
        log::error!("job {number}: cannot write master record: {e}");
    }
    append_out(&dir, &format!("{END_STANDARD_OUT}\n"));
    if let Err(e) = fs::File::create(dir.join(DONE)) {
        log::error!("job {number}: cannot create DONE: {e}");
    }
}
