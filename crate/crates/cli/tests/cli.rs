use std::fs;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use solverhub_broker::{Broker, BrokerConfig, BrokerHandle};

const BIN: &str = env!("CARGO_BIN_EXE_solverhub");

fn start() -> (tempfile::TempDir, BrokerHandle) {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("solver_tree"), "Miscellaneous|misc\n").unwrap();
    let config = tmp.path().join("broker.toml");
    fs::write(
        &config,
        "server_name = \"Test Server\"\nlisten = \"127.0.0.1:0\"\nserver_var = \"var\"\n\
         solver_tree = \"solver_tree\"\nreceiver_poll_ms = 50\nscheduler_poll_ms = 50\n",
    )
    .unwrap();
    let broker = Broker::start(BrokerConfig::load(&config).unwrap()).unwrap();
    (tmp, broker)
}

fn solverhub(b: &BrokerHandle, args: &[&str], stdin: &[u8]) -> Output {
    let mut child = Command::new(BIN)
        .arg("--broker")
        .arg(b.addr().to_string())
        .args(args)
        .env_remove("SOLVERHUB_CONFIG")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn out(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn err(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn submit_body_from_stdin_prints_number_stream_and_results() {
    let (tmp, b) = start();
    let o = solverhub(&b, &["submit", "--body", "-"], b"help\n");
    assert!(o.status.success(), "{}", err(&o));
    let text = out(&o);
    let first: u64 = text.lines().next().unwrap().parse().unwrap();
    assert!(text.contains("Welcome to Test Server!"), "{text}");
    assert!(
        !text.contains("<END_STANDARD_OUT>"),
        "marker should be stripped: {text}"
    );
    assert!(text.contains("ADMIN:ADDSOLVER"), "{text}");

    let saved = tmp.path().join("r.txt");
    let o = solverhub(
        &b,
        &[
            "results",
            &first.to_string(),
            "--out",
            saved.to_str().unwrap(),
        ],
        b"",
    );
    assert!(o.status.success(), "{}", err(&o));
    assert!(fs::read_to_string(&saved)
        .unwrap()
        .contains("ADMIN:KILL_JOB"));
}

#[test]
fn submit_by_field_assignment() {
    let (_tmp, b) = start();
    let o = solverhub(
        &b,
        &["submit", "--solver", "ADMIN:HELP", "help=ADMIN:KILL_JOB"],
        b"",
    );
    assert!(o.status.success(), "{}", err(&o));
    assert!(out(&o).contains("Help for ADMIN:KILL_JOB"), "{}", out(&o));

    let o = solverhub(&b, &["submit", "--solver", "ADMIN:HELP", "colour=red"], b"");
    assert!(!o.status.success());
    assert!(err(&o).contains("has no field `colour`"), "{}", err(&o));
}

#[test]
fn errors_exit_nonzero_with_the_broker_message() {
    let (_tmp, b) = start();
    let o = solverhub(&b, &["results", "999"], b"");
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(err(&o), "solverhub: ERROR: no job 999\n");

    let o = Command::new(BIN)
        .args(["--broker", "127.0.0.1:1", "solvers"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(
        err(&o).starts_with("solverhub: ERROR: connect: "),
        "{}",
        err(&o)
    );

    let o = Command::new(BIN)
        .args(["report", "daily"])
        .env_remove("SOLVERHUB_CONFIG")
        .output()
        .unwrap();
    assert!(err(&o).contains("--config"), "{}", err(&o));
}

#[test]
fn admin_solvers_and_config() {
    let (_tmp, b) = start();
    let o = solverhub(&b, &["solvers"], b"");
    assert!(o.status.success());
    assert_eq!(out(&o), "");
    let o = solverhub(&b, &["solvers", "--admin"], b"");
    assert!(out(&o).contains("Kill Job=ADMIN:KILL_JOB"), "{}", out(&o));
    let o = solverhub(&b, &["config", "ADMIN:HELP"], b"");
    assert_eq!(out(&o), ": : help: NULL: help.type\n");
}

#[test]
fn monitor_reads_the_store() {
    let (tmp, b) = start();
    let config = tmp.path().join("broker.toml");
    let config = config.to_str().unwrap();
    solverhub(&b, &["submit", "--body", "-"], b"help\n");
    let o = solverhub(&b, &["--config", config, "monitor", "log", "mail"], b"");
    assert!(
        err(&o).contains("receiver, scheduler, socket, checker"),
        "{}",
        err(&o)
    );
    let o = solverhub(
        &b,
        &[
            "--config", config, "monitor", "log", "receiver", "--lines", "50",
        ],
        b"",
    );
    assert!(
        out(&o).starts_with("receiver: Test Server restart on "),
        "{}",
        out(&o)
    );
    let o = solverhub(
        &b,
        &[
            "--config",
            config,
            "monitor",
            "query",
            "--solver",
            "ADMIN:HELP",
        ],
        b"",
    );
    assert!(out(&o).ends_with("1 job\n"), "{}", out(&o));
    let o = solverhub(&b, &["--config", config, "monitor", "queues"], b"");
    assert!(out(&o).starts_with("Job Queues:\n"), "{}", out(&o));
}

fn write_exe(path: &Path, script: &str) {
    fs::write(path, format!("#!/bin/sh\n{script}")).unwrap();
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).unwrap();
}

#[test]
fn register_and_run_an_agent_in_the_background() {
    let (tmp, b) = start();
    let manifest = tmp.path().join("echo.toml");
    fs::write(
        tmp.path().join("tokens"),
        "Input: TEXT: begin.in: end.in: IN\n",
    )
    .unwrap();
    fs::write(
        &manifest,
        "type = \"MISC\"\nid = \"ECHO\"\nname = \"Echo\"\npassword = \"pw\"\ncontact = \"a@b.org\"\n\
         stations = [{ host = \"127.0.0.1\" }]\ntokens = { file = \"tokens\" }\n",
    )
    .unwrap();
    let o = solverhub(&b, &["register-solver", manifest.to_str().unwrap()], b"");
    assert!(o.status.success(), "{}{}", out(&o), err(&o));
    assert!(
        out(&o).starts_with("Registered MISC:ECHO (Echo)."),
        "{}",
        out(&o)
    );
    let o = solverhub(&b, &["register-solver", manifest.to_str().unwrap()], b"");
    assert!(
        out(&o).starts_with("Updated MISC:ECHO (Echo)."),
        "{}",
        out(&o)
    );

    let driver = tmp.path().join("echo-driver");
    write_exe(&driver, "cp IN job.results\n");
    let agent = tmp.path().join("agent.toml");
    fs::write(
        &agent,
        format!(
            "broker = \"{}\"\nsolver = \"MISC:ECHO\"\npassword = \"pw\"\ncontact = \"a@b.org\"\n\
             driver = \"{}\"\nlisten = \"127.0.0.1:0\"\nwork_root = \"{}\"\n",
            b.addr(),
            driver.display(),
            tmp.path().join("comms").display()
        ),
    )
    .unwrap();
    let agent = agent.to_str().unwrap();
    let o = solverhub(&b, &["agent", "start", agent], b"");
    assert!(o.status.success(), "{}{}", out(&o), err(&o));
    let o = solverhub(&b, &["agent", "status", agent], b"");
    let status = out(&o);
    let run = solverhub(
        &b,
        &[
            "submit",
            "--solver",
            "MISC:ECHO",
            "--out",
            tmp.path().join("res").to_str().unwrap(),
            "IN=hello",
        ],
        b"",
    );
    let stop = solverhub(&b, &["agent", "stop", agent], b"");

    assert!(status.starts_with("MISC:ECHO@"), "{status}{}", err(&o));
    assert!(run.status.success(), "{}", err(&run));
    assert_eq!(fs::read_to_string(tmp.path().join("res")).unwrap(), "hello");
    assert!(stop.status.success(), "{}", err(&stop));
    let o = solverhub(&b, &["agent", "status", agent], b"");
    assert!(!o.status.success());
}
