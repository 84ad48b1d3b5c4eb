//! Socket server: one thread per connection.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use solverhub_core::store::{Log, DONE};
use solverhub_core::wire::{
    java_client_version, read_payload, read_request, send_error, send_sized, JobStreamWriter,
    Request, WireError, UP_TO_DATE,
};
use solverhub_core::{Interface, SolverKey};

use crate::admin;
use crate::jobfiles;
use crate::registry::{host_matches, verify_password};
use crate::{BrokerError, Shared};

const RESULTS_GRACE: Duration = Duration::from_secs(2);

pub(crate) fn bind(shared: &Shared) -> Result<TcpListener, BrokerError> {
    let config = &shared.config;
    let port = config
        .listen
        .rsplit_once(':')
        .map(|(_, p)| p.to_string())
        .unwrap_or_default();
    let mut attempt = 0;
    loop {
        match TcpListener::bind(&config.listen) {
            Ok(l) => {
                let actual = l.local_addr().map(|a| a.port().to_string()).unwrap_or(port);
                shared.store.log(
                    Log::Socket,
                    &format!(
                        "{} accepting connections on {} port {actual}.",
                        config.server_name,
                        config.host_name()
                    ),
                );
                return Ok(l);
            }
            Err(e) => {
                shared
                    .store
                    .log(Log::Socket, &format!("Cannot bind to port {port}!"));
                attempt += 1;
                if attempt > config.bind_retries {
                    shared.store.log(
                        Log::Socket,
                        &format!(
                            "{} could not be started: giving up on port {port} after {attempt} attempts.",
                            config.server_name
                        ),
                    );
                    return Err(BrokerError::Bind {
                        addr: config.listen.clone(),
                        source: e,
                    });
                }
                thread::sleep(Duration::from_millis(config.bind_retry_ms));
            }
        }
    }
}

pub(crate) fn serve(shared: Arc<Shared>, listener: TcpListener) {
    if let Err(e) = listener.set_nonblocking(true) {
        log::error!("socket server: {e}");
        return;
    }
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                let s = Arc::clone(&shared);
                let spawned = thread::Builder::new()
                    .name("connection".into())
                    .spawn(move || {
                        let _ = stream.set_nonblocking(false);
                        handle(&s, stream, peer.ip());
                    });
                if let Err(e) = spawned {
                    log::error!("socket server: cannot start handler: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("socket server: accept: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle(shared: &Shared, stream: TcpStream, peer: IpAddr) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(120)));
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut out = BufWriter::new(stream);
    let req = match read_request(&mut reader) {
        Ok(r) => r,
        Err(e) => {
            shared.store.log(
                Log::Socket,
                &format!("socket: bad request from {peer}: {e}"),
            );
            let _ = send_error(&mut out, &e.to_string());
            return;
        }
    };
    shared.store.log(
        Log::Socket,
        &format!("socket: {}@{peer}: {}", req.userid, req.request),
    );
    let result = respond(shared, &req.request, peer, &mut reader, &mut out);
    if let Err(e) = result {
        match e {
            Reply::Error(msg) => {
                let _ = send_error(&mut out, &msg);
            }
            Reply::Io(e) => log::debug!("socket: {peer}: {e}"),
        }
    }
    let _ = out.flush();
}

enum Reply {
    Error(String),
    Io(io::Error),
}

impl From<io::Error> for Reply {
    fn from(e: io::Error) -> Self {
        Reply::Io(e)
    }
}

impl From<WireError> for Reply {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io(e) => Reply::Io(e),
            other => Reply::Error(other.to_string()),
        }
    }
}

fn respond<R: Read, W: Write>(
    shared: &Shared,
    request: &Request,
    peer: IpAddr,
    reader: &mut R,
    out: &mut W,
) -> Result<(), Reply> {
    let registry = &shared.registry;
    match request {
        Request::SolverList => {
            let text = fs::read(registry.solver_list_path()).unwrap_or_default();
            send_sized(out, &text)?;
        }
        Request::AdminList => {
            let mut text = fs::read(registry.solver_list_path()).unwrap_or_default();
            text.extend(fs::read(registry.admin_dir().join(admin::ADMIN_LIST)).unwrap_or_default());
            send_sized(out, &text)?;
        }
        Request::Help(key) => {
            let reg = registered(shared, key)?;
            let text = reg
                .tool_help
                .or(reg.email_help)
                .unwrap_or_else(|| format!("No help is available for {key}.\n"));
            send_sized(out, text.as_bytes())?;
        }
        Request::Config(key) => {
            let reg = registered(shared, key)?;
            send_sized(out, reg.tokens.as_bytes())?;
        }
        Request::Verify => {
            send_sized(out, shared.config.server_name.as_bytes())?;
        }
        Request::GetResults(n) => {
            let dir = shared.store.job_dir(*n);
            if !dir.is_dir() {
                return Err(Reply::Error(format!("no job {n}")));
            }
            // The end marker reaches the stream just before DONE is written.
            let deadline = Instant::now() + RESULTS_GRACE;
            while !dir.join(DONE).exists() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(20));
            }
            if !dir.join(DONE).exists() {
                return Err(Reply::Error(format!("job {n} has not finished")));
            }
            let data = fs::read(dir.join(jobfiles::RESULTS))
                .map_err(|e| Reply::Error(format!("results for job {n}: {e}")))?;
            send_sized(out, &data)?;
        }
        Request::BeginJob { size } => {
            let body = read_payload(reader, *size)?;
            begin_job(shared, peer, &body, out)?;
        }
        Request::Register {
            key,
            password,
            port,
        } => {
            let reply = register(shared, key, password, *port, peer)?;
            send_sized(out, reply.as_bytes())?;
        }
        Request::BeginResults { size, number } => {
            let data = read_payload(reader, *size)?;
            accept_results(shared, *number, &data, peer)?;
            send_sized(
                out,
                format!("results for job {number} received\n").as_bytes(),
            )?;
        }
        Request::FetchArtifact(name) => {
            let data = artifact(shared, name);
            send_sized(out, &data)?;
        }
        Request::RunJob { .. } | Request::KillJob(_) => {
            return Err(Reply::Error(format!(
                "`{request}` is a request for a solver station, not the server"
            )));
        }
    }
    Ok(())
}

fn registered(shared: &Shared, key: &SolverKey) -> Result<crate::registry::Registration, Reply> {
    let reg = shared
        .registry
        .load(key)
        .map_err(|e| Reply::Error(e.to_string()))?
        .ok_or_else(|| Reply::Error(format!("no solver {key} is registered")))?;
    if !key.is_admin() && !shared.registry.is_listed(key) {
        return Err(Reply::Error(format!("solver {key} is disabled")));
    }
    Ok(reg)
}

static SPOOL_SEQ: AtomicU64 = AtomicU64::new(0);

fn spool_name(spool: &Path) -> String {
    loop {
        let n = SPOOL_SEQ.fetch_add(1, Ordering::Relaxed);
        let name = format!("job.{}-{n}", std::process::id());
        let taken = [
            name.clone(),
            format!("DONE.{name}"),
            format!("{name}.number"),
        ]
        .iter()
        .any(|f| spool.join(f).exists());
        if !taken {
            return name;
        }
    }
}

fn begin_job<W: Write>(
    shared: &Shared,
    peer: IpAddr,
    body: &[u8],
    out: &mut W,
) -> Result<(), Reply> {
    let store = &shared.store;
    let spool = store
        .spool_dir(Interface::Socket)
        .map_err(|e| Reply::Error(e.to_string()))?;
    let name = spool_name(&spool);
    let mut submission = format!("From: {peer}\n\n").into_bytes();
    submission.extend_from_slice(body);
    store
        .spool_deposit(Interface::Socket, &name, &submission)
        .map_err(|e| Reply::Error(e.to_string()))?;

    let number_file = spool.join(format!("{name}.number"));
    let deadline = Instant::now() + Duration::from_millis(shared.config.number_wait_ms);
    let number = loop {
        if let Some(n) = fs::read_to_string(&number_file)
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
        {
            let _ = fs::remove_file(&number_file);
            break n;
        }
        if Instant::now() > deadline || shared.stopping() {
            return Err(Reply::Error(
                "the server did not accept the job in time".into(),
            ));
        }
        thread::sleep(Duration::from_millis(10));
    };
    stream_output(shared, number, out)?;
    Ok(())
}

/// Tails job.out to the client until the end marker has gone out.
fn stream_output<W: Write>(shared: &Shared, number: u64, out: &mut W) -> io::Result<()> {
    let dir = shared.store.job_dir(number);
    let path = dir.join(jobfiles::OUT);
    let mut writer = JobStreamWriter::start(out, number)?;
    let mut file: Option<File> = None;
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        if file.is_none() {
            file = File::open(&path).ok();
        }
        let done_before = dir.join(DONE).exists();
        let n = match file.as_mut() {
            Some(f) => f.read(&mut buf)?,
            None => 0,
        };
        if n > 0 {
            writer.forward(&buf[..n])?;
            if writer.is_finished() {
                return Ok(());
            }
            continue;
        }
        if done_before {
            // everything up to DONE has been read
            return Ok(());
        }
        if shared.stopping() {
            return Ok(());
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn register(
    shared: &Shared,
    key: &SolverKey,
    password: &str,
    port: u16,
    peer: IpAddr,
) -> Result<String, Reply> {
    let registry = &shared.registry;
    let _guard = registry.lock();
    let reg = registry
        .load(key)
        .map_err(|e| Reply::Error(e.to_string()))?
        .ok_or_else(|| Reply::Error(format!("no solver {key} is registered")))?;
    if reg.password_hash.is_empty() || !verify_password(&reg.password_hash, password) {
        shared.store.log(
            Log::Socket,
            &format!("socket: register {key} from {peer} refused: bad password."),
        );
        return Err(Reply::Error(format!("incorrect password for {key}")));
    }
    let Some(station) = reg.stations.iter().find(|s| host_matches(&s.host, peer)) else {
        return Err(Reply::Error(format!(
            "{peer} is not a registered station for {key}"
        )));
    };
    registry
        .set_station_port(&station.host, key, port)
        .map_err(|e| Reply::Error(e.to_string()))?;
    shared.store.log(
        Log::Socket,
        &format!("socket: registered {}:{key}:{port}.", station.host),
    );
    Ok(format!(
        "registered {key} on {} port {port}\n",
        station.host
    ))
}

fn accept_results(shared: &Shared, number: u64, data: &[u8], peer: IpAddr) -> Result<(), Reply> {
    let dir = shared.store.job_dir(number);
    let station = jobfiles::read_text(&dir, jobfiles::STATION);
    let executing = dir.is_dir() && !dir.join(DONE).exists() && station.is_some();
    if !executing {
        return Err(Reply::Error(format!("job {number} is not executing")));
    }
    let host = station
        .as_deref()
        .and_then(|s| s.rsplit_once(':'))
        .map(|(h, _)| h.trim_start_matches('[').trim_end_matches(']').to_string())
        .unwrap_or_default();
    if !host_matches(&host, peer) {
        return Err(Reply::Error(format!(
            "job {number} is not running on {peer}"
        )));
    }
    shared
        .store
        .write_atomic(&dir.join(jobfiles::RESULTS), data)
        .map_err(|e| Reply::Error(e.to_string()))
}

fn artifact(shared: &Shared, name: &str) -> Vec<u8> {
    let Some(dir) = &shared.config.artifacts_dir else {
        return UP_TO_DATE.as_bytes().to_vec();
    };
    if let Some(version) = java_client_version(name) {
        return match latest_java_client(dir) {
            Some((latest, _)) if latest == version => UP_TO_DATE.as_bytes().to_vec(),
            Some((_, path)) => fs::read(path).unwrap_or_else(|_| UP_TO_DATE.as_bytes().to_vec()),
            None => UP_TO_DATE.as_bytes().to_vec(),
        };
    }
    fs::read(dir.join(name)).unwrap_or_else(|_| UP_TO_DATE.as_bytes().to_vec())
}

fn latest_java_client(dir: &Path) -> Option<(String, PathBuf)> {
    let mut best: Option<(Vec<u64>, String, PathBuf)> = None;
    for entry in fs::read_dir(dir).ok()?.flatten() {
        let file = entry.file_name().to_string_lossy().into_owned();
        let Some(v) = java_client_version(&file) else {
            continue;
        };
        let parts: Vec<u64> = v.split('.').map(|p| p.parse().unwrap_or(0)).collect();
        if best.as_ref().is_none_or(|(b, _, _)| parts > *b) {
            best = Some((parts, v.to_string(), entry.path()));
        }
    }
    best.map(|(_, v, p)| (v, p))
}
