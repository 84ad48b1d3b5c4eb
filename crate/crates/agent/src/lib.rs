//! Solver station agent. Registers its port with the broker, then runs each
//! job it is sent in a fresh work directory and its own process group.

pub mod config;
pub mod notify;
mod runner;

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use socket2::{Domain, Socket, Type};
use solverhub_core::wire::{
    read_payload, read_request, read_sized, send_error, send_sized, Request, WireError, WireRequest,
};
use thiserror::Error;

pub use config::AgentConfig;
pub use notify::{LogNotifier, Notifier};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("the broker refused the registration: {0}")]
    Refused(String),
    #[error("the broker could not be reached: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const NOTIFICATIONS: &str = "notifications.log";

/// Bookkeeping for a job whose driver is running.
struct RunningJob {
    pgid: i32,
    kill_requested: Arc<AtomicBool>,
}

struct Shared {
    config: AgentConfig,
    work_root: PathBuf,
    identity: String,
    notifier: Arc<dyn Notifier>,
    running: Mutex<HashMap<u64, RunningJob>>,
    shutdown: AtomicBool,
}

impl Shared {
    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Relaxed)
    }

    fn userid(&self) -> String {
        format!("agent-{}", self.config.key())
    }
}

/// A running agent inside this process.
pub struct AgentHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    server: Option<JoinHandle<()>>,
    pid_file: PathBuf,
}

impl AgentHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `TYPE:ID@host:port`, as returned by `verify`.
    pub fn identity(&self) -> &str {
        &self.shared.identity
    }

    pub fn work_root(&self) -> &Path {
        &self.shared.work_root
    }

    /// Number of jobs whose driver is still running.
    pub fn running_jobs(&self) -> usize {
        self.shared
            .running
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .len()
    }

    pub fn wait(mut self) {
        if let Some(t) = self.server.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.server.take() {
            let _ = t.join();
        }
        let _ = fs::remove_file(&self.pid_file);
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn pid_file(work_root: &Path, key: &solverhub_core::SolverKey) -> PathBuf {
    work_root.join("daemons").join(format!("{key}.pid"))
}

pub struct Agent;

impl Agent {
    /// Binds the listen port, registers with the broker and starts serving.
    pub fn start(
        config: AgentConfig,
        notifier: Arc<dyn Notifier>,
    ) -> Result<AgentHandle, AgentError> {
        config.validate()?;
        let work_root = config.work_root()?;
        fs::create_dir_all(work_root.join("daemons"))?;
        let listener = TcpListener::bind(&config.listen)
            .map_err(|e| AgentError::Config(format!("cannot listen on {}: {e}", config.listen)))?;
        let addr = listener.local_addr()?;
        let host = config.host.clone().unwrap_or_else(|| addr.ip().to_string());
        let identity = format!("{}@{host}:{}", config.key(), addr.port());
        let shared = Arc::new(Shared {
            config,
            work_root,
            identity,
            notifier,
            running: Mutex::new(HashMap::new()),
            shutdown: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let server = thread::Builder::new()
            .name("agent-server".into())
            .spawn(move || serve(s, listener))?;
        let pid_file = pid_file(&shared.work_root, shared.config.key());
        // dropping the handle on an error below stops the server thread
        let handle = AgentHandle {
            addr,
            shared,
            server: Some(server),
            pid_file,
        };
        register(&handle.shared, addr.port())?;
        fs::write(
            &handle.pid_file,
            format!("{} {}\n", std::process::id(), addr.port()),
        )?;
        log::info!(
            "{} registered with {}",
            handle.shared.identity,
            handle.shared.config.broker
        );
        Ok(handle)
    }
}

/// Connects to the broker from the listen address, so the broker sees the
/// station's own IP.
fn connect_broker(config: &AgentConfig) -> io::Result<TcpStream> {
    let mut last = None;
    for addr in config.broker.to_socket_addrs()? {
        let socket = Socket::new(Domain::for_address(addr), Type::STREAM, None)?;
        if let Some(ip) = config
            .source_ip()
            .filter(|ip| ip.is_ipv4() == addr.is_ipv4())
        {
            socket.bind(&SocketAddr::new(ip, 0).into())?;
        }
        match socket.connect_timeout(&addr.into(), Duration::from_secs(10)) {
            Ok(()) => {
                let stream: TcpStream = socket.into();
                stream.set_read_timeout(Some(Duration::from_secs(60)))?;
                return Ok(stream);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| io::Error::other(format!("{} did not resolve", config.broker))))
}

/// One request to the broker with a sized reply.
fn call_broker(shared: &Shared, request: Request, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut stream = connect_broker(&shared.config)?;
    let mut msg = WireRequest::new(shared.userid(), request).encode();
    msg.extend_from_slice(payload);
    stream.write_all(&msg)?;
    stream.flush()?;
    read_sized(&mut BufReader::new(stream))
}

fn register(shared: &Shared, port: u16) -> Result<(), AgentError> {
    let config = &shared.config;
    let mut delay = Duration::from_millis(config.register_retry_ms);
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let request = Request::Register {
            key: config.key().clone(),
            password: config.password.clone(),
            port,
        };
        match call_broker(shared, request, &[]) {
            Ok(_) => return Ok(()),
            Err(WireError::Remote(msg)) => {
                log::error!("register {}: {msg}", config.key());
                return Err(AgentError::Refused(msg));
            }
            Err(e) => {
                log::warn!(
                    "register {} with {} (attempt {attempt}): {e}",
                    config.key(),
                    config.broker
                );
                if config.register_attempts != 0 && attempt >= config.register_attempts {
                    return Err(AgentError::Unreachable(e.to_string()));
                }
            }
        }
        let until = Instant::now() + delay;
        while Instant::now() < until {
            if shared.stopping() {
                return Err(AgentError::Unreachable("stopped".into()));
            }
            thread::sleep(Duration::from_millis(25));
        }
        delay = (delay * 2).min(Duration::from_secs(60));
    }
}

fn serve(shared: Arc<Shared>, listener: TcpListener) {
    if let Err(e) = listener.set_nonblocking(true) {
        log::error!("agent: {e}");
        return;
    }
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                let s = Arc::clone(&shared);
                let spawned = thread::Builder::new()
                    .name("agent-conn".into())
                    .spawn(move || {
                        let _ = stream.set_nonblocking(false);
                        if let Err(e) = handle(&s, stream) {
                            log::warn!("agent: {peer}: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    log::error!("agent: cannot start handler: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("agent: accept: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle(shared: &Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(120)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let request = match read_request(&mut reader) {
        Ok(r) => r,
        Err(e) => return send_error(&mut BufWriter::new(stream), &e.to_string()),
    };
    let mut out = BufWriter::new(stream);
    match request.request {
        Request::Verify => send_sized(&mut out, shared.identity.as_bytes())?,
        Request::KillJob(n) => send_sized(&mut out, kill(shared, n).as_bytes())?,
        Request::RunJob { size, number } => {
            let payload = match read_payload(&mut reader, size) {
                Ok(p) => p,
                Err(e) => return send_error(&mut out, &e.to_string()),
            };
            let stream = out.into_inner().map_err(|e| e.into_error())?;
            runner::run_job(shared, number, &payload, stream);
            return Ok(());
        }
        other => send_error(
            &mut out,
            &format!("`{other}` is not a request for a solver station"),
        )?,
    }
    out.flush()
}

fn kill(shared: &Shared, number: u64) -> String {
    if !shared.config.killable {
        return format!(
            "Job kill requests are not enabled by the agent {}.\n",
            shared.identity
        );
    }
    let running = shared.running.lock().unwrap_or_else(|e| e.into_inner());
    let Some(job) = running.get(&number) else {
        return format!(
            "The agent {} has no record of job {number}.\n",
            shared.identity
        );
    };
    job.kill_requested.store(true, Ordering::Relaxed);
    runner::signal_group(job.pgid, libc::SIGTERM);
    format!(
        "Job {number} has been killed by the agent {}.\n",
        shared.identity
    )
}
