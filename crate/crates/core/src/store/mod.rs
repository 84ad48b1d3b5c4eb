//! The broker's on-disk state under one `server_var` root.

mod master;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime};

use thiserror::Error;

use crate::archive;
use crate::job::{Interface, Job};

pub use master::{blank_row, Disposition, MasterFilter, MasterRecord, RECORD_LEN};

pub const MAIL: &str = "MAIL";
pub const DONE: &str = "DONE";
const JOBS_SPOOL: &str = "JOBS";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("serial number file {0} is unreadable or corrupt")]
    CorruptSerial(PathBuf),
    #[error("job directory {0} already exists")]
    JobExists(PathBuf),
    #[error("spool directory {0} is missing")]
    MissingSpool(PathBuf),
    #[error("`{0}` is not a valid spool name")]
    BadName(String),
    #[error("interface {0} has no spool")]
    NoSpool(Interface),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Log {
    Receiver,
    Scheduler,
    Socket,
    Checker,
}

impl Log {
    pub fn file_name(self) -> &'static str {
        match self {
            Log::Receiver => "receiver",
            Log::Scheduler => "scheduler",
            Log::Socket => "socket",
            Log::Checker => "checker",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub archived: usize,
    pub filled: usize,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    master_lock: Mutex<()>,
    log_lock: Mutex<()>,
}

impl Store {
    /// Creates any missing parts of the layout and opens the store.
    pub fn init(root: impl Into<PathBuf>) -> Result<Store> {
        let store = Store::unchecked(root.into());
        let dirs = [
            store.spool_dir_named("SOCKET"),
            store.spool_dir_named("WEB"),
            store.spool_dir_named("KESTREL"),
            store.spool_dir_named(JOBS_SPOOL),
            store.jobs_dir(),
            store.solvers_dir(),
            store.stations_dir(),
            store.logs_dir(),
            store.root.join("databases"),
            store.tmp_dir(),
            store.archive_dir(),
        ];
        for dir in &dirs {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let serial = store.serial_path();
        if !serial.exists() {
            store.write_atomic(&serial, b"1\n")?;
        }
        for path in [
            store.solver_list_path(),
            store.station_ports_path(),
            store.master_path(),
        ] {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
        }
        store.read_serial()?;
        Ok(store)
    }

    /// Opens an existing store; fails if the serial file is unusable.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let store = Store::unchecked(root.into());
        store.read_serial()?;
        Ok(store)
    }

    fn unchecked(root: PathBuf) -> Store {
        Store {
            root,
            master_lock: Mutex::new(()),
            log_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }
    pub fn job_dir(&self, number: u64) -> PathBuf {
        self.jobs_dir().join(format!("job.{number}"))
    }
    pub fn lib_dir(&self) -> PathBuf {
        self.root.join("lib")
    }
    pub fn solvers_dir(&self) -> PathBuf {
        self.lib_dir().join("solvers")
    }
    pub fn solver_dir(&self, key: &str) -> PathBuf {
        self.solvers_dir().join(key)
    }
    pub fn solver_list_path(&self) -> PathBuf {
        self.lib_dir().join("solver_list")
    }
    pub fn station_ports_path(&self) -> PathBuf {
        self.lib_dir().join("station_type_port")
    }
    pub fn serial_path(&self) -> PathBuf {
        self.lib_dir().join("next_serial_number")
    }
    pub fn stations_dir(&self) -> PathBuf {
        self.root.join("proc").join("stations")
    }
    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn log_path(&self, log: Log) -> PathBuf {
        self.logs_dir().join(log.file_name())
    }
    pub fn queues_path(&self) -> PathBuf {
        self.logs_dir().join("queues")
    }
    pub fn master_path(&self) -> PathBuf {
        self.root.join("databases").join("master")
    }
    pub fn tmp_dir(&self) -> PathBuf {
        self.root.join("tmp")
    }
    pub fn archive_dir(&self) -> PathBuf {
        self.root.join("archive")
    }

    pub fn spool_dir(&self, interface: Interface) -> Result<PathBuf> {
        interface
            .spool_name()
            .map(|name| self.spool_dir_named(name))
            .ok_or(StoreError::NoSpool(interface))
    }

    fn spool_dir_named(&self, name: &str) -> PathBuf {
        self.root.join("spool").join(name)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write_atomic(&self, path: &Path, data: &[u8]) -> Result<()> {
        write_atomic(path, data)
    }

    fn read_serial(&self) -> Result<u64> {
        let path = self.serial_path();
        let text =
            fs::read_to_string(&path).map_err(|_| StoreError::CorruptSerial(path.clone()))?;
        parse_serial(&text).ok_or(StoreError::CorruptSerial(path))
    }

    /// Hands out the current serial number and advances the file under an
    /// exclusive lock.
    pub fn next_job_number(&self) -> Result<u64> {
        let path = self.serial_path();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|_| StoreError::CorruptSerial(path.clone()))?;
        file.lock().map_err(io_err(&path))?;
        let mut text = String::new();
        file.read_to_string(&mut text)
            .map_err(|_| StoreError::CorruptSerial(path.clone()))?;
        let n = parse_serial(&text).ok_or_else(|| StoreError::CorruptSerial(path.clone()))?;
        let next = format!("{}\n", n + 1);
        file.seek(SeekFrom::Start(0))
            .and_then(|_| file.set_len(0))
            .and_then(|_| file.write_all(next.as_bytes()))
            .and_then(|_| file.sync_data())
            .map_err(io_err(&path))?;
        Ok(n)
    }

    pub fn spool_deposit(&self, interface: Interface, name: &str, body: &[u8]) -> Result<()> {
        let dir = self.spool_dir(interface)?;
        deposit(&dir, name, body)
    }

    pub fn spool_collect(&self, interface: Interface) -> Result<Vec<(String, Vec<u8>)>> {
        let dir = self.spool_dir(interface)?;
        collect(&dir)
    }

    /// Hands a parsed job to the scheduler through the JOBS spool.
    pub fn jobs_deposit(&self, name: &str, body: &[u8]) -> Result<()> {
        deposit(&self.spool_dir_named(JOBS_SPOOL), name, body)
    }

    pub fn jobs_collect(&self) -> Result<Vec<(String, Vec<u8>)>> {
        collect(&self.spool_dir_named(JOBS_SPOOL))
    }

    pub fn create_job_dir(&self, number: u64, received: &[u8]) -> Result<PathBuf> {
        let dir = self.job_dir(number);
        fs::create_dir(&dir).map_err(|e| match e.kind() {
            io::ErrorKind::AlreadyExists => StoreError::JobExists(dir.clone()),
            _ => StoreError::Io {
                path: dir.clone(),
                source: e,
            },
        })?;
        let path = dir.join("job.received");
        fs::write(&path, received).map_err(io_err(&path))?;
        Ok(dir)
    }

    pub fn is_done(&self, number: u64) -> bool {
        self.job_dir(number).join(DONE).exists()
    }

    /// Writes the record at its row, padding any new gap rows with spaces.
    pub fn write_master_record(&self, record: &MasterRecord) -> Result<()> {
        let path = self.master_path();
        let row = record.to_bytes();
        let offset = (record.number.max(1) - 1) * RECORD_LEN as u64;
        let _guard = self.master_lock.lock().unwrap_or_else(|e| e.into_inner());
        let _flock = self.lock_master_file()?;
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len();
        // Round a damaged length up so rows stay aligned.
        let aligned = len.div_ceil(RECORD_LEN as u64) * RECORD_LEN as u64;
        if aligned > len {
            let pad = vec![b' '; (aligned - len) as usize];
            file.write_all_at(&pad, len).map_err(io_err(&path))?;
        }
        if offset > aligned {
            let pad = vec![b' '; (offset - aligned) as usize];
            file.write_all_at(&pad, aligned).map_err(io_err(&path))?;
        }
        file.write_all_at(&row, offset).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))
    }

    /// Serializes master writers across processes. Gap filling replaces the
    /// file by rename, so the lock lives in a separate file.
    fn lock_master_file(&self) -> Result<File> {
        let path = self.root.join("databases").join(".master.lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(file)
    }

    pub fn read_master_record(&self, number: u64) -> Result<Option<MasterRecord>> {
        if number == 0 {
            return Ok(None);
        }
        let path = self.master_path();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut row = [0u8; RECORD_LEN];
        match file.read_exact_at(&mut row, (number - 1) * RECORD_LEN as u64) {
            Ok(()) => Ok(MasterRecord::from_bytes(&row).filter(|r| r.number == number)),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Matching records in job-number order; blank and damaged rows are skipped.
    pub fn query_master(&self, filter: &MasterFilter) -> Result<Vec<MasterRecord>> {
        let path = self.master_path();
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        Ok(data
            .chunks_exact(RECORD_LEN)
            .filter_map(MasterRecord::from_bytes)
            .filter(|r| filter.matches(r))
            .collect())
    }

    /// Rewrites every row that is neither a record nor already blank.
    fn fill_master_gaps(&self) -> Result<usize> {
        let path = self.master_path();
        let _guard = self.master_lock.lock().unwrap_or_else(|e| e.into_inner());
        let _flock = self.lock_master_file()?;
        let mut data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let blank = blank_row();
        let rows = data.len().div_ceil(RECORD_LEN);
        data.resize(rows * RECORD_LEN, b' ');
        let mut filled = 0;
        for row in data.chunks_exact_mut(RECORD_LEN) {
            if row != blank && MasterRecord::from_bytes(row).is_none() {
                row.copy_from_slice(&blank);
                filled += 1;
            }
        }
        if filled > 0 {
            write_atomic(&path, &data)?;
        }
        Ok(filled)
    }

    pub fn write_queues(&self, queued: &[Job], executing: &[Job]) -> Result<()> {
        self.write_atomic(
            &self.queues_path(),
            queues_snapshot(queued, executing).as_bytes(),
        )
    }

    /// Appends one line to a daemon log.
    pub fn log(&self, log: Log, line: &str) {
        let path = self.log_path(log);
        let mut text = line.trim_end_matches('\n').to_string();
        text.push('\n');
        let _guard = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let result = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(text.as_bytes()));
        if let Err(e) = result {
            log::error!("cannot append to {}: {e}", path.display());
        }
    }

    /// Archives finished job directories whose DONE marker is older than
    /// `max_age`, then fills master database gaps.
    pub fn clean(&self, max_age: Duration, now: SystemTime) -> CleanReport {
        let mut report = CleanReport::default();
        let jobs = self.jobs_dir();
        let entries = match fs::read_dir(&jobs) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("cannot scan {}: {e}", jobs.display());
                return report;
            }
        };
        let mut old = Vec::new();
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(number) = name
                .strip_prefix("job.")
                .and_then(|n| n.parse::<u64>().ok())
            else {
                continue;
            };
            let done = entry.path().join(DONE);
            let Ok(modified) = fs::metadata(&done).and_then(|m| m.modified()) else {
                continue;
            };
            if now.duration_since(modified).unwrap_or_default() > max_age {
                old.push(number);
            }
        }
        old.sort_unstable();
        for number in old {
            match self.archive_job(number) {
                Ok(()) => report.archived += 1,
                Err(e) => log::warn!("cannot archive job {number}: {e}"),
            }
        }
        match self.fill_master_gaps() {
            Ok(n) => report.filled = n,
            Err(e) => log::warn!("cannot fill master database: {e}"),
        }
        report
    }

    fn archive_job(&self, number: u64) -> Result<()> {
        let dir = self.job_dir(number);
        let name = format!("job.{number}");
        let out = self.archive_dir().join(format!("{name}.tar.gz"));
        let partial = self.archive_dir().join(format!(".{name}.tar.gz.partial"));
        archive::pack_dir(&dir, &name, &partial).map_err(io_err(&partial))?;
        fs::rename(&partial, &out).map_err(io_err(&out))?;
        fs::remove_dir_all(&dir).map_err(io_err(&dir))
    }
}

fn parse_serial(text: &str) -> Option<u64> {
    text.trim().parse::<u64>().ok().filter(|&n| n > 0)
}

pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    let result = tmp
        .1
        .write_all(data)
        .and_then(|_| tmp.1.sync_data())
        .and_then(|_| fs::rename(&tmp.0, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp.0);
        return Err(io_err(path)(e));
    }
    Ok(())
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(PathBuf, File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let base = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    loop {
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = dir.join(format!(".{base}.{}.{n}.tmp", std::process::id()));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
}

fn check_spool_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != MAIL
        && !name.starts_with("DONE.")
        && !name.starts_with('.')
        && !name.contains('/');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadName(name.to_string()))
    }
}

fn deposit(dir: &Path, name: &str, body: &[u8]) -> Result<()> {
    check_spool_name(name)?;
    if !dir.is_dir() {
        return Err(StoreError::MissingSpool(dir.to_path_buf()));
    }
    let file = dir.join(name);
    fs::write(&file, body).map_err(io_err(&file))?;
    let done = dir.join(format!("DONE.{name}"));
    File::create(&done).map_err(io_err(&done))?;
    let mail = dir.join(MAIL);
    File::create(&mail).map_err(io_err(&mail))?;
    Ok(())
}

fn collect(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mail = dir.join(MAIL);
    match fs::remove_file(&mail) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&mail)(e)),
    }
    let mut ready = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(base) = name.strip_prefix("DONE.") else {
            continue;
        };
        if !dir.join(base).is_file() {
            continue;
        }
        let when = entry
            .metadata()
            .and_then(|m| m.modified())
            .unwrap_or(SystemTime::UNIX_EPOCH);
        ready.push((when, base.to_string()));
    }
    ready.sort();
    let mut out = Vec::with_capacity(ready.len());
    for (_, name) in ready {
        let path = dir.join(&name);
        let body = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("cannot read spooled {}: {e}", path.display());
                continue;
            }
        };
        let _ = fs::remove_file(dir.join(format!("DONE.{name}")));
        let _ = fs::remove_file(&path);
        out.push((name, body));
    }
    Ok(out)
}

/// Text of the `queues` file.
pub fn queues_snapshot(queued: &[Job], executing: &[Job]) -> String {
    fn section(out: &mut String, jobs: &[Job], empty: &str) {
        if jobs.is_empty() {
            out.push_str(empty);
            out.push('\n');
            return;
        }
        let mut keys: Vec<&str> = Vec::new();
        for job in jobs {
            if !keys.contains(&job.solver_key.as_str()) {
                keys.push(&job.solver_key);
            }
        }
        for key in keys {
            out.push_str("  ");
            out.push_str(key);
            out.push(':');
            for job in jobs.iter().filter(|j| j.solver_key == key) {
                out.push(' ');
                out.push_str(&job.number.to_string());
            }
            out.push('\n');
        }
    }
    let mut out = String::from("Job Queues:\n");
    section(&mut out, queued, "No jobs in queue.");
    out.push_str("Job Execution:\n");
    section(&mut out, executing, "No jobs executing.");
    out
}

#[cfg(test)]
mod tests;
