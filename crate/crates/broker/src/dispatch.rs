//! Running a scheduled job: in-process for admin solvers, on an agent
//! otherwise.

use std::fs;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::{Duration, Instant};

use solverhub_core::archive::pack_files;
use solverhub_core::store::Disposition;
use solverhub_core::wire::{Request, WireRequest};
use solverhub_core::SolverKey;

use crate::jobfiles::{self, append_out, append_out_bytes, finalize};
use crate::{admin, SchedMsg, Shared};

pub(crate) fn run_admin(shared: &Arc<Shared>, number: u64, key: &SolverKey) {
    let dir = shared.store.job_dir(number);
    let text = admin::run(shared, key, &dir);
    if let Err(e) = shared
        .store
        .write_atomic(&dir.join(jobfiles::RESULTS), text.as_bytes())
    {
        log::error!("job {number}: cannot write results: {e}");
    }
    finalize(&shared.store, number, Disposition::Done, "", "");
    shared.notify(SchedMsg::Finished(number));
}

fn connect(host: &str, port: u16) -> std::io::Result<TcpStream> {
    let mut last = None;
    for addr in (host, port).to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(10)) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::other(format!("{host} did not resolve"))))
}

pub(crate) fn run_remote(
    shared: &Arc<Shared>,
    number: u64,
    key: &SolverKey,
    host: &str,
    port: u16,
) {
    let dir = shared.store.job_dir(number);
    let fail = |text: String| {
        finalize(
            &shared.store,
            number,
            Disposition::Failed,
            &text,
            "dispatch failed",
        );
        shared.notify(SchedMsg::Finished(number));
    };

    let names: Vec<String> = match shared
        .registry
        .load(key)
        .ok()
        .flatten()
        .map(|r| r.token_config())
    {
        Some(Ok(config)) => config
            .entries()
            .iter()
            .map(|e| e.target_file.clone())
            .filter(|t| dir.join(t).is_file())
            .collect(),
        _ => {
            return fail(format!(
                "Job {number}: solver {key} is no longer registered.\n"
            ))
        }
    };
    let payload = match pack_files(&dir, &names) {
        Ok(p) => p,
        Err(e) => return fail(format!("Job {number}: cannot pack input files: {e}\n")),
    };

    let mut stream = match connect(host, port) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("job {number}: connect {host}:{port}: {e}");
            shared.notify(SchedMsg::ConnectFailed(number));
            return;
        }
    };
    let _ = fs::write(dir.join(jobfiles::STATION), format!("{host}:{port}\n"));
    let request = WireRequest::new(
        shared.config.server_name.replace(char::is_whitespace, "_"),
        Request::RunJob {
            size: payload.len() as u64,
            number,
        },
    );
    let mut msg = request.encode();
    msg.extend_from_slice(&payload);
    if let Err(e) = stream.write_all(&msg).and_then(|_| stream.flush()) {
        return fail(format!(
            "Job {number}: the solver station {host} dropped the connection: {e}\n"
        ));
    }
    append_out(&dir, &format!("Running on {host}:\n"));

    let mut buf = vec![0u8; 16 * 1024];
    let mut lost = None;
    loop {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                if let Err(e) = append_out_bytes(&dir, &buf[..n]) {
                    log::error!("job {number}: cannot append output: {e}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => {
                lost = Some(e);
                break;
            }
        }
    }

    // The agent uploads results before it closes the stream; allow a little
    // slack for that connection to finish.
    let results = dir.join(jobfiles::RESULTS);
    let deadline = Instant::now() + shared.config.results_grace();
    while !results.exists() && Instant::now() < deadline && !shared.stopping() {
        std::thread::sleep(Duration::from_millis(20));
    }
    if results.exists() {
        finalize(&shared.store, number, Disposition::Done, "", "");
    } else {
        let why = lost.map(|e| format!(": {e}")).unwrap_or_default();
        finalize(
            &shared.store,
            number,
            Disposition::Failed,
            &format!(
                "Job {number} failed: the connection to the solver station {host} ended before results were returned{why}.\nAny partial output is in the job log.\n"
            ),
            "station lost",
        );
    }
    shared.notify(SchedMsg::Finished(number));
}
