//! Line-oriented request protocol spoken by clients, the broker and agents.
//!
//! A request is two lines, the caller's userid and the request itself.
//! Replies are sized (a decimal byte count line, then the bytes) except the
//! reply to a client `begin job`, which streams until `<END_STANDARD_OUT>`.

use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::key::SolverKey;

pub const DEFAULT_PORT: u16 = 3333;
pub const MAX_LINE: usize = 4096;
pub const ERROR_PREFIX: &str = "ERROR: ";
pub const UP_TO_DATE: &str = "Your version is already up to date.\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMarker {
    ClearScreen,
    EndStandardOut,
}

impl StreamMarker {
    pub const fn as_str(self) -> &'static str {
        match self {
            StreamMarker::ClearScreen => "<CLEAR_SCREEN>",
            StreamMarker::EndStandardOut => "<END_STANDARD_OUT>",
        }
    }
}

pub const CLEAR_SCREEN: &str = StreamMarker::ClearScreen.as_str();
pub const END_STANDARD_OUT: &str = StreamMarker::EndStandardOut.as_str();

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unknown request `{0}`")]
    UnknownRequest(String),
    #[error("bad argument: {0}")]
    BadArgument(String),
    #[error("connection closed before the {0} was complete")]
    Truncated(&'static str),
    #[error("{0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    SolverList,
    AdminList,
    Help(SolverKey),
    Config(SolverKey),
    /// Client submission; the body follows.
    BeginJob {
        size: u64,
    },
    /// Broker to agent: run a job whose tar+gzip payload follows.
    RunJob {
        size: u64,
        number: u64,
    },
    GetResults(u64),
    Verify,
    Register {
        key: SolverKey,
        password: String,
        port: u16,
    },
    BeginResults {
        size: u64,
        number: u64,
    },
    KillJob(u64),
    FetchArtifact(String),
}

impl Request {
    /// Bytes that follow the request line.
    pub fn payload_size(&self) -> Option<u64> {
        match *self {
            Request::BeginJob { size }
            | Request::RunJob { size, .. }
            | Request::BeginResults { size, .. } => Some(size),
            _ => None,
        }
    }

    pub fn parse(line: &str) -> Result<Request, WireError> {
        let line = line.strip_suffix('\r').unwrap_or(line).trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        let unknown = || WireError::UnknownRequest(line.to_string());
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| WireError::BadArgument(format!("`{s}` is not a number")))
        };
        let key = |s: &str| {
            s.parse::<SolverKey>()
                .map_err(|e| WireError::BadArgument(e.to_string()))
        };
        let req = match words.as_slice() {
            ["solver_list"] => Request::SolverList,
            ["admin_list"] => Request::AdminList,
            ["verify"] => Request::Verify,
            ["help", k] => Request::Help(key(k)?),
            ["config", k] => Request::Config(key(k)?),
            ["begin", "job", size] => Request::BeginJob { size: num(size)? },
            ["begin", "job", size, n] => Request::RunJob {
                size: num(size)?,
                number: num(n)?,
            },
            ["begin", "results", size, n] => Request::BeginResults {
                size: num(size)?,
                number: num(n)?,
            },
            ["get", "results", n] => Request::GetResults(num(n)?),
            ["kill", "job", n] => Request::KillJob(num(n)?),
            ["register", k, password, port] => Request::Register {
                key: key(k)?,
                password: password.to_string(),
                port: port
                    .parse()
                    .ok()
                    .filter(|&p| p > 0)
                    .ok_or_else(|| WireError::BadArgument(format!("bad port `{port}`")))?,
            },
            ["solver_list" | "admin_list" | "verify" | "help" | "config" | "begin" | "get"
            | "kill" | "register", ..] => {
                return Err(WireError::BadArgument(format!(
                    "malformed request `{line}`"
                )))
            }
            [name] if is_artifact_name(name) => Request::FetchArtifact(name.to_string()),
            _ => return Err(unknown()),
        };
        Ok(req)
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::SolverList => write!(f, "solver_list"),
            Request::AdminList => write!(f, "admin_list"),
            Request::Help(k) => write!(f, "help {k}"),
            Request::Config(k) => write!(f, "config {k}"),
            Request::BeginJob { size } => write!(f, "begin job {size}"),
            Request::RunJob { size, number } => write!(f, "begin job {size} {number}"),
            Request::GetResults(n) => write!(f, "get results {n}"),
            Request::Verify => write!(f, "verify"),
            Request::Register {
                key,
                password,
                port,
            } => write!(f, "register {key} {password} {port}"),
            Request::BeginResults { size, number } => write!(f, "begin results {size} {number}"),
            Request::KillJob(n) => write!(f, "kill job {n}"),
            Request::FetchArtifact(name) => f.write_str(name),
        }
    }
}

/// Static files the broker hands out by name.
pub fn is_artifact_name(name: &str) -> bool {
    if name == "submit-main.txt" || name == "submit-help.txt" {
        return true;
    }
    const PATTERNS: [(&str, &str); 6] = [
        ("submit-", ".tk"),
        ("java-client-", ".jar"),
        ("comms-daemon-", ".pl"),
        ("comms-backup-", ".pl"),
        ("disable-backup-", ".pl"),
        ("comms-", ".tk"),
    ];
    PATTERNS.iter().any(|(prefix, suffix)| {
        name.strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(suffix))
            .is_some_and(is_version)
    })
}

fn is_version(v: &str) -> bool {
    !v.is_empty()
        && v.chars().next().is_some_and(|c| c.is_ascii_alphanumeric())
        && v.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
}

/// Version part of a `java-client-<v>.jar` request.
pub fn java_client_version(name: &str) -> Option<&str> {
    name.strip_prefix("java-client-")?.strip_suffix(".jar")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub userid: String,
    pub request: Request,
}

impl WireRequest {
    pub fn new(userid: impl Into<String>, request: Request) -> Self {
        WireRequest {
            userid: userid.into(),
            request,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        format!("{}\n{}\n", self.userid, self.request).into_bytes()
    }
}

/// Reads one LF-terminated line (CR before LF dropped). `Ok(None)` on a
/// clean end of stream.
pub fn read_line<R: BufRead>(r: &mut R) -> Result<Option<String>, WireError> {
    let mut buf = Vec::new();
    r.take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf)?;
    if buf.is_empty() {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        if buf.len() > MAX_LINE {
            return Err(WireError::BadArgument("request line too long".into()));
        }
        return Err(WireError::Truncated("line"));
    }
    buf.pop();
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| WireError::BadArgument("line is not UTF-8".into()))
}

pub fn read_request<R: BufRead>(r: &mut R) -> Result<WireRequest, WireError> {
    let userid = read_line(r)?.ok_or(WireError::Truncated("userid"))?;
    let line = read_line(r)?.ok_or(WireError::Truncated("request"))?;
    Ok(WireRequest {
        userid,
        request: Request::parse(&line)?,
    })
}

pub fn read_payload<R: Read>(r: &mut R, size: u64) -> Result<Vec<u8>, WireError> {
    let mut data = Vec::with_capacity(size.min(1 << 20) as usize);
    r.take(size).read_to_end(&mut data)?;
    if (data.len() as u64) < size {
        return Err(WireError::Truncated("payload"));
    }
    Ok(data)
}

pub fn send_sized<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    writeln!(w, "{}", payload.len())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn send_error<W: Write>(w: &mut W, message: &str) -> io::Result<()> {
    let text = format!("{ERROR_PREFIX}{}\n", message.trim_end());
    send_sized(w, text.as_bytes())
}

/// Reads a sized reply. Replies starting with `ERROR: ` become
/// [`WireError::Remote`].
pub fn read_sized<R: BufRead>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let data = read_sized_raw(r)?;
    match data.strip_prefix(ERROR_PREFIX.as_bytes()) {
        Some(msg) => Err(WireError::Remote(
            String::from_utf8_lossy(msg).trim_end().to_string(),
        )),
        None => Ok(data),
    }
}

pub fn read_sized_raw<R: BufRead>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let line = read_line(r)?.ok_or(WireError::Truncated("size line"))?;
    let size = line
        .trim()
        .parse::<u64>()
        .map_err(|_| WireError::BadArgument(format!("bad size line `{line}`")))?;
    read_payload(r, size)
}

/// Forwards a job's output after its number line, stopping once the end
/// marker (and the newline after it, if any) has gone out.
pub struct JobStreamWriter<W: Write> {
    out: W,
    tail: Vec<u8>,
    finished: bool,
    pending_newline: bool,
}

impl<W: Write> JobStreamWriter<W> {
    pub fn start(mut out: W, number: u64) -> io::Result<Self> {
        writeln!(out, "{number}")?;
        out.flush()?;
        Ok(JobStreamWriter {
            out,
            tail: Vec::new(),
            finished: false,
            pending_newline: false,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished && !self.pending_newline
    }

    /// Writes one chunk; returns how many bytes of it were forwarded.
    pub fn forward(&mut self, chunk: &[u8]) -> io::Result<usize> {
        if self.pending_newline && !chunk.is_empty() {
            self.pending_newline = false;
            if chunk.first() == Some(&b'\n') {
                self.out.write_all(b"\n")?;
                self.out.flush()?;
                return Ok(1);
            }
            return Ok(0);
        }
        if self.finished || chunk.is_empty() {
            return Ok(0);
        }
        let marker = END_STANDARD_OUT.as_bytes();
        let mut joined = self.tail.clone();
        joined.extend_from_slice(chunk);
        let take = match find(&joined, marker) {
            Some(at) => {
                self.finished = true;
                let mut end = at + marker.len();
                if joined.get(end) == Some(&b'\n') {
                    end += 1;
                } else if end == joined.len() {
                    self.pending_newline = true;
                }
                end - self.tail.len()
            }
            None => chunk.len(),
        };
        self.out.write_all(&chunk[..take])?;
        self.out.flush()?;
        let keep = marker.len() - 1;
        let start = joined.len().saturating_sub(keep);
        self.tail = joined[start..].to_vec();
        Ok(take)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Writes the number line and then every chunk until the end marker.
pub fn stream_job<W, I, B>(out: W, number: u64, chunks: I) -> io::Result<W>
where
    W: Write,
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut writer = JobStreamWriter::start(out, number)?;
    for chunk in chunks {
        writer.forward(chunk.as_ref())?;
        if writer.is_finished() {
            break;
        }
    }
    Ok(writer.into_inner())
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Blocking client for one request per connection.
#[derive(Debug, Clone)]
pub struct Client {
    addr: String,
    userid: String,
    pub connect_timeout: Duration,
    pub io_timeout: Option<Duration>,
}

impl Client {
    pub fn new(addr: impl Into<String>, userid: impl Into<String>) -> Self {
        Client {
            addr: addr.into(),
            userid: userid.into(),
            connect_timeout: Duration::from_secs(10),
            io_timeout: Some(Duration::from_secs(60)),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn connect(&self) -> io::Result<TcpStream> {
        let mut last = None;
        let addrs: Vec<SocketAddr> = self.addr.to_socket_addrs()?.collect();
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.connect_timeout) {
                Ok(s) => {
                    s.set_read_timeout(self.io_timeout)?;
                    s.set_write_timeout(self.io_timeout)?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| {
            io::Error::new(
                io::ErrorKind::NotFound,
                format!("{} did not resolve", self.addr),
            )
        }))
    }

    /// Sends the request (with its payload) and returns the open reader.
    pub fn send(
        &self,
        request: &Request,
        payload: &[u8],
    ) -> Result<BufReader<TcpStream>, WireError> {
        let mut stream = self.connect()?;
        let mut msg = WireRequest::new(self.userid.clone(), request.clone()).encode();
        msg.extend_from_slice(payload);
        stream.write_all(&msg)?;
        stream.flush()?;
        Ok(BufReader::new(stream))
    }

    /// A request with a sized reply.
    pub fn call(&self, request: &Request, payload: &[u8]) -> Result<Vec<u8>, WireError> {
        let mut r = self.send(request, payload)?;
        read_sized(&mut r)
    }

    /// Submits a body and returns the job number plus the live output stream.
    pub fn begin_job(&self, body: &[u8]) -> Result<(u64, JobStreamReader), WireError> {
        let mut r = self.send(
            &Request::BeginJob {
                size: body.len() as u64,
            },
            body,
        )?;
        let first = read_line(&mut r)?.ok_or(WireError::Truncated("job number"))?;
        match first.trim().parse::<u64>() {
            Ok(n) => Ok((n, JobStreamReader { inner: r })),
            Err(_) => {
                // the server replied with a sized error instead
                let mut rest = Vec::new();
                let _ = r.read_to_end(&mut rest);
                let text = String::from_utf8_lossy(&rest);
                let text = text.trim_end();
                Err(WireError::Remote(
                    text.strip_prefix(ERROR_PREFIX).unwrap_or(text).to_string(),
                ))
            }
        }
    }
}

/// The unsized output that follows a job number.
pub struct JobStreamReader {
    inner: BufReader<TcpStream>,
}

impl Read for JobStreamReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf)
    }
}
