//! One job: unpack, run the driver under limits, stream its output and
//! upload the results.

use std::fs;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use solverhub_core::archive::unpack_files;
use solverhub_core::wire::Request;

use crate::{call_broker, RunningJob, Shared};

pub(crate) fn signal_group(pgid: i32, signal: i32) {
    // SAFETY: killpg(2) has no memory effects; a stale group just gives ESRCH.
    unsafe {
        libc::killpg(pgid, signal);
    }
}

enum Outcome {
    Unpack(String),
    Spawn(io::Error),
    Exited {
        status: ExitStatus,
        timed_out: bool,
        killed: bool,
    },
}

pub(crate) fn run_job(shared: &Arc<Shared>, number: u64, payload: &[u8], stream: TcpStream) {
    let dir = shared.work_root.join(format!("job.{number}"));
    let out = Arc::new(Mutex::new(stream));
    let outcome = execute(shared, number, payload, &dir, &out);
    let results = results_for(shared, number, &dir, &outcome);
    if let Some(note) = note(shared, number, &outcome) {
        let mut s = out.lock().unwrap_or_else(|e| e.into_inner());
        let _ = s.write_all(note.as_bytes());
    }
    upload(shared, number, &results);
    if !shared.config.save {
        if let Err(e) = fs::remove_dir_all(&dir) {
            if e.kind() != io::ErrorKind::NotFound {
                log::warn!("job {number}: cannot remove {}: {e}", dir.display());
            }
        }
    }
    // the stream closes when `out` drops, after the results are in
}

fn execute(
    shared: &Arc<Shared>,
    number: u64,
    payload: &[u8],
    dir: &Path,
    out: &Arc<Mutex<TcpStream>>,
) -> Outcome {
    let config = &shared.config;
    let _ = fs::remove_dir_all(dir);
    if let Err(e) = fs::create_dir_all(dir) {
        return Outcome::Unpack(e.to_string());
    }
    if let Err(e) = unpack_files(payload, dir) {
        return Outcome::Unpack(e.to_string());
    }
    if config.notify {
        shared.notifier.notify(
            &config.contact,
            &format!("job {number} arrived"),
            &format!("Job {number} is starting on {}.", shared.identity),
        );
    }

    let mut cmd = Command::new(&config.driver);
    cmd.current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(if config.debug {
            Stdio::piped()
        } else {
            Stdio::null()
        })
        .process_group(0);
    if let Some(limit) = config.file_size_limit {
        // SAFETY: setrlimit is async-signal-safe and touches no parent state.
        unsafe {
            cmd.pre_exec(move || {
                let lim = libc::rlimit {
                    rlim_cur: limit as libc::rlim_t,
                    rlim_max: limit as libc::rlim_t,
                };
                if libc::setrlimit(libc::RLIMIT_FSIZE, &lim) != 0 {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return Outcome::Spawn(e),
    };
    let pgid = child.id() as i32;
    let kill_requested = Arc::new(AtomicBool::new(false));
    shared
        .running
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(
            number,
            RunningJob {
                pgid,
                kill_requested: Arc::clone(&kill_requested),
            },
        );

    let mut pumps = Vec::new();
    if let Some(stdout) = child.stdout.take() {
        pumps.push(pump(stdout, Arc::clone(out)));
    }
    if let Some(stderr) = child.stderr.take() {
        pumps.push(pump(stderr, Arc::clone(out)));
    }

    let (status, timed_out) = supervise(shared, &mut child, pgid, &kill_requested);
    // nothing of the job may outlive its driver
    signal_group(pgid, libc::SIGKILL);
    shared
        .running
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .remove(&number);
    for p in pumps {
        let _ = p.join();
    }
    match status {
        Ok(status) => Outcome::Exited {
            status,
            timed_out,
            killed: kill_requested.load(Ordering::Relaxed),
        },
        Err(e) => Outcome::Spawn(e),
    }
}

/// Copies driver output to the broker as it arrives.
fn pump<R: Read + Send + 'static>(
    mut from: R,
    to: Arc<Mutex<TcpStream>>,
) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        let mut connected = true;
        loop {
            match from.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    if connected {
                        let mut s = to.lock().unwrap_or_else(|e| e.into_inner());
                        // keep draining the pipe even if the broker went away
                        connected = s.write_all(&buf[..n]).and_then(|_| s.flush()).is_ok();
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => break,
            }
        }
    })
}

/// Waits for the driver, enforcing the time limit and kill requests:
/// TERM to the group, then KILL once the grace period is over.
fn supervise(
    shared: &Shared,
    child: &mut Child,
    pgid: i32,
    kill_requested: &AtomicBool,
) -> (io::Result<ExitStatus>, bool) {
    let config = &shared.config;
    let deadline = Instant::now() + config.time_limit();
    let mut timed_out = false;
    let mut hard_kill_at: Option<Instant> = None;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return (Ok(status), timed_out),
            Ok(None) => {}
            Err(e) => return (Err(e), timed_out),
        }
        let now = Instant::now();
        if hard_kill_at.is_none() {
            if now >= deadline {
                timed_out = true;
                signal_group(pgid, libc::SIGTERM);
                hard_kill_at = Some(now + config.kill_grace());
            } else if kill_requested.load(Ordering::Relaxed) {
                hard_kill_at = Some(now + config.kill_grace());
            }
        }
        if hard_kill_at.is_some_and(|t| now >= t) {
            signal_group(pgid, libc::SIGKILL);
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn file_size_exceeded(status: &ExitStatus) -> bool {
    status.signal() == Some(libc::SIGXFSZ) || status.code() == Some(128 + libc::SIGXFSZ)
}

/// Text shown in the job's live output for anything but a normal exit.
fn note(shared: &Shared, number: u64, outcome: &Outcome) -> Option<String> {
    let config = &shared.config;
    match outcome {
        Outcome::Exited { killed: true, .. } => {
            Some(format!("\nJob {number} was killed on request.\n"))
        }
        Outcome::Exited {
            timed_out: true, ..
        } => Some(format!(
            "\nJob {number} exceeded the time limit of {} seconds and was stopped.\n",
            config.time_limit
        )),
        Outcome::Exited { status, .. }
            if config.file_size_limit.is_some() && file_size_exceeded(status) =>
        {
            Some(format!(
                "\nJob {number} was stopped: a file exceeded the size limit of {} bytes.\n",
                config.file_size_limit.unwrap_or(0)
            ))
        }
        _ => None,
    }
}

fn results_for(shared: &Shared, number: u64, dir: &Path, outcome: &Outcome) -> Vec<u8> {
    let config = &shared.config;
    let existing = fs::read(dir.join("job.results")).ok();
    let with_partial = |mut text: String| {
        if let Some(data) = &existing {
            text.push_str("Partial results follow.\n\n");
            let mut bytes = text.into_bytes();
            bytes.extend_from_slice(data);
            return bytes;
        }
        text.into_bytes()
    };
    match outcome {
        Outcome::Unpack(e) => format!(
            "Job {number} failed: the input files could not be unpacked on {}: {e}\n",
            shared.identity
        )
        .into_bytes(),
        Outcome::Spawn(e) => {
            let text = format!(
                "Job {number} failed: the driver {} could not be run on {}: {e}\n",
                config.driver.display(),
                shared.identity
            );
            shared
                .notifier
                .notify(&config.contact, &format!("job {number}: driver failed to start"), &text);
            text.into_bytes()
        }
        Outcome::Exited { killed: true, .. } => {
            with_partial(format!("Job {number} was killed on request.\n"))
        }
        Outcome::Exited { timed_out: true, .. } => with_partial(format!(
            "Job {number} failed: it exceeded the time limit of {} seconds on {} and was stopped.\n",
            config.time_limit, shared.identity
        )),
        Outcome::Exited { status, .. }
            if config.file_size_limit.is_some() && file_size_exceeded(status) =>
        {
            format!(
                "Job {number} failed: the driver tried to write a file larger than the limit of {} bytes on {}.\n",
                config.file_size_limit.unwrap_or(0),
                shared.identity
            )
            .into_bytes()
        }
        Outcome::Exited { status, .. } => match existing {
            Some(data) => data,
            None => {
                let text = format!(
                    "Job {number} failed: the solver driver on {} finished ({status}) without writing job.results.\nThe solver's administrator has been notified.\n",
                    shared.identity
                );
                shared.notifier.notify(
                    &config.contact,
                    &format!("job {number}: no job.results"),
                    &format!(
                        "The driver {} did not create job.results for job {number} ({status}).",
                        config.driver.display()
                    ),
                );
                text.into_bytes()
            }
        },
    }
}

fn upload(shared: &Shared, number: u64, results: &[u8]) {
    let request = || Request::BeginResults {
        size: results.len() as u64,
        number,
    };
    for attempt in 1..=3 {
        match call_broker(shared, request(), results) {
            Ok(_) => return,
            Err(e) => {
                log::warn!("job {number}: results upload attempt {attempt}: {e}");
                if matches!(e, solverhub_core::wire::WireError::Remote(_)) {
                    return;
                }
            }
        }
        thread::sleep(Duration::from_millis(200 * attempt));
    }
}
