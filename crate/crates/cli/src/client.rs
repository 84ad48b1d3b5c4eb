//! Commands that talk to a broker over the wire.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use solverhub_core::token::{
    format_submission, parse_token_config, EntryKind, SubmissionFields, TokenConfig,
};
use solverhub_core::wire::{Client, Request, WireError, CLEAR_SCREEN, END_STANDARD_OUT};
use solverhub_core::SolverKey;

use crate::manifest::Manifest;

const ANSI_CLEAR: &[u8] = b"\x1b[2J\x1b[H";

/// Turns wire errors into messages; refused connections read like the
/// checker log (`ERROR: connect: ...`).
pub fn wire_error(e: WireError) -> anyhow::Error {
    match e {
        WireError::Io(e)
            if matches!(
                e.kind(),
                io::ErrorKind::ConnectionRefused
                    | io::ErrorKind::TimedOut
                    | io::ErrorKind::NotFound
            ) =>
        {
            anyhow!("ERROR: connect: {e}")
        }
        WireError::Remote(msg) => anyhow!("ERROR: {msg}"),
        other => anyhow!("{other}"),
    }
}

pub fn call(client: &Client, request: Request) -> Result<Vec<u8>> {
    client.call(&request, &[]).map_err(wire_error)
}

pub fn token_config(client: &Client, key: &SolverKey) -> Result<TokenConfig> {
    let text = call(client, Request::Config(key.clone()))?;
    parse_token_config(&text).with_context(|| format!("token configuration of {key}"))
}

/// Finds the config entry an assignment names: by label, begin token or
/// target file.
fn entry<'a>(
    config: &'a TokenConfig,
    name: &str,
) -> Option<&'a solverhub_core::token::TokenConfigEntry> {
    config
        .by_label(name)
        .filter(|e| !e.label.is_empty())
        .or_else(|| config.by_begin(name.as_bytes()))
        .or_else(|| config.by_target(name))
}

/// Builds a submission from `label=value` assignments. File fields take a
/// path; text fields take a value, or `@path` to read one.
pub fn build_fields(
    key: &SolverKey,
    config: &TokenConfig,
    assignments: &[String],
) -> Result<SubmissionFields> {
    let mut fields = SubmissionFields {
        solver_type: key.solver_type().to_string(),
        solver_id: key.id().to_string(),
        ..SubmissionFields::default()
    };
    for a in assignments {
        let Some((name, value)) = a.split_once('=') else {
            bail!("`{a}` is not a label=value assignment");
        };
        let Some(e) = entry(config, name.trim()) else {
            let labels: Vec<String> = config
                .entries()
                .iter()
                .map(|e| {
                    if e.label.is_empty() {
                        e.begin_token.clone()
                    } else {
                        format!("{} ({})", e.label, e.begin_token)
                    }
                })
                .collect();
            bail!(
                "{key} has no field `{}`; its fields are:\n  {}",
                name.trim(),
                labels.join("\n  ")
            );
        };
        let data = match &e.kind {
            EntryKind::FileUpload { .. } => {
                fs::read(value).with_context(|| format!("{}: cannot read {value}", e.label))?
            }
            EntryKind::TextArea => match value.strip_prefix('@') {
                Some(path) => {
                    fs::read(path).with_context(|| format!("{}: cannot read {path}", e.label))?
                }
                None => value.as_bytes().to_vec(),
            },
            _ => value.as_bytes().to_vec(),
        };
        fields.sections.insert(e.target_file.clone(), data);
    }
    Ok(fields)
}

/// Copies the job stream, acting on the markers unless `raw`.
pub fn render_stream<R: Read, W: Write>(
    from: R,
    out: &mut W,
    raw: bool,
    clear: bool,
) -> io::Result<()> {
    if raw {
        let mut from = from;
        let mut buf = [0u8; 8192];
        loop {
            let n = from.read(&mut buf)?;
            if n == 0 {
                return out.flush();
            }
            out.write_all(&buf[..n])?;
            out.flush()?;
        }
    }
    let mut reader = BufReader::new(from);
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return out.flush();
        }
        let text = line.strip_suffix(b"\n").unwrap_or(&line);
        let trimmed = text.trim_ascii();
        if trimmed == CLEAR_SCREEN.as_bytes() {
            if clear {
                out.write_all(ANSI_CLEAR)?;
            }
        } else if let Some(before) = trimmed.strip_suffix(END_STANDARD_OUT.as_bytes()) {
            if !before.is_empty() {
                out.write_all(before)?;
                out.write_all(b"\n")?;
            }
        } else {
            out.write_all(&line)?;
        }
        out.flush()?;
    }
}

/// Fetches results, allowing a moment for a job that just finished.
pub fn results(client: &Client, number: u64) -> Result<Vec<u8>> {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match client.call(&Request::GetResults(number), &[]) {
            Ok(r) => return Ok(r),
            Err(WireError::Remote(msg))
                if msg.contains("has not finished") && Instant::now() < deadline =>
            {
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(wire_error(e)),
        }
    }
}

pub fn write_results(data: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, data).with_context(|| format!("cannot write {}", path.display()))
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(data)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

pub struct SubmitOptions {
    pub raw: bool,
    pub quiet: bool,
    pub out: Option<PathBuf>,
}

/// Sends a body, shows the job stream and returns the job number and
/// results.
pub fn submit_body(client: &Client, body: &[u8], opts: &SubmitOptions) -> Result<(u64, Vec<u8>)> {
    let (number, stream) = client.begin_job(body).map_err(wire_error)?;
    if opts.quiet {
        render_stream(stream, &mut io::sink(), true, false)?;
    } else {
        let mut stdout = io::stdout().lock();
        writeln!(stdout, "{number}")?;
        let tty = unsafe { libc::isatty(libc::STDOUT_FILENO) } == 1;
        render_stream(stream, &mut stdout, opts.raw, tty)?;
    }
    let data = results(client, number)?;
    Ok((number, data))
}

pub fn submit_fields(
    client: &Client,
    key: &SolverKey,
    fields: &SubmissionFields,
    opts: &SubmitOptions,
) -> Result<(u64, Vec<u8>)> {
    let config = token_config(client, key)?;
    let body = format_submission(fields, &config)?;
    submit_body(client, &body, opts)
}

pub fn register_solver(client: &Client, manifest_path: &Path) -> Result<String> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let fields = manifest.fields(base)?;
    let key: SolverKey = "ADMIN:ADDSOLVER".parse()?;
    let quiet = SubmitOptions {
        raw: true,
        quiet: true,
        out: None,
    };
    let (_, data) = submit_fields(client, &key, &fields, &quiet)?;
    let text = String::from_utf8_lossy(&data).into_owned();
    if text.starts_with("Registered ") || text.starts_with("Updated ") {
        Ok(text)
    } else {
        Err(anyhow!("{}", text.trim_end()))
    }
}

/// Runs an admin solver with scalar fields and returns its results text.
pub fn admin_job(client: &Client, id: &str, values: &[(&str, String)]) -> Result<String> {
    let key = SolverKey::new("ADMIN", id)?;
    let mut fields = SubmissionFields {
        solver_type: "ADMIN".into(),
        solver_id: id.into(),
        ..SubmissionFields::default()
    };
    for (target, value) in values {
        fields
            .sections
            .insert(target.to_string(), value.clone().into_bytes());
    }
    let quiet = SubmitOptions {
        raw: true,
        quiet: true,
        out: None,
    };
    let (_, data) = submit_fields(client, &key, &fields, &quiet)?;
    Ok(String::from_utf8_lossy(&data).into_owned())
}
