//! `solverhub`: submit jobs, manage solvers, run the broker and agents, and
//! look at what they are doing.

mod client;
mod daemon;
mod local;
mod manifest;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use solverhub_broker::ops::Period;
use solverhub_core::store::MasterFilter;
use solverhub_core::wire::{Client, Request};
use solverhub_core::SolverKey;

use client::SubmitOptions;

#[derive(Parser)]
#[command(
    name = "solverhub",
    version,
    about = "Job broker client and administration",
    disable_help_subcommand = true
)]
struct Cli {
    /// Broker address for client commands.
    #[arg(
        long,
        global = true,
        env = "SOLVERHUB_BROKER",
        default_value = "localhost:3333"
    )]
    broker: String,
    /// Broker configuration file, for broker, monitor, report, checker and clean.
    #[arg(long, global = true, env = "SOLVERHUB_CONFIG")]
    config: Option<PathBuf>,
    /// User id sent with each request.
    #[arg(
        long,
        global = true,
        env = "SOLVERHUB_USER",
        default_value = "solverhub"
    )]
    user: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit a job and stream its output, then print its results.
    Submit {
        /// Solver to run, TYPE:ID.
        #[arg(long, required_unless_present = "body")]
        solver: Option<SolverKey>,
        /// Send this file (`-` for stdin) as the job body as is.
        #[arg(long, conflicts_with_all = ["solver", "fields"])]
        body: Option<PathBuf>,
        /// Write the results here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pass the stream through untouched.
        #[arg(long)]
        raw: bool,
        /// Field assignments: `label=value`; file fields take a path and
        /// text fields accept `@path`.
        fields: Vec<String>,
    },
    /// List the registered solvers.
    Solvers {
        /// Include the admin solvers.
        #[arg(long)]
        admin: bool,
    },
    /// Fetch the results of a finished job.
    Results {
        number: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show a solver's token configuration.
    Config { solver: SolverKey },
    /// Show a solver's help text.
    Help { solver: SolverKey },
    /// Register or update a solver from a manifest file.
    RegisterSolver { manifest: PathBuf },
    /// Enable, disable or delete a solver.
    Status {
        action: StatusAction,
        #[arg(long)]
        solver: SolverKey,
        #[arg(long)]
        password: String,
    },
    /// Ask the solver station to kill a running job.
    Kill {
        number: u64,
        #[arg(long)]
        password: String,
    },
    /// Control the agent described by an agent configuration file.
    Agent {
        #[command(subcommand)]
        command: AgentCommand,
    },
    /// Control the broker.
    Broker {
        #[command(subcommand)]
        command: BrokerCommand,
    },
    /// Look at queues, logs and the master database.
    Monitor {
        #[command(subcommand)]
        view: MonitorView,
    },
    /// Usage report from the master database.
    Report { period: ReportPeriod },
    /// Exit 0 if the broker answers; otherwise kill it, restart it and exit 1.
    Checker {
        /// Seconds to wait for an answer.
        #[arg(long, default_value_t = 10)]
        timeout: u64,
        /// Do not restart a dead broker.
        #[arg(long)]
        no_restart: bool,
    },
    /// Archive finished job directories and fill master database gaps.
    Clean {
        /// Archive jobs finished at least this many days ago.
        #[arg(long, default_value_t = 7)]
        days: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatusAction {
    Enable,
    Disable,
    Delete,
}

#[derive(Subcommand)]
enum AgentCommand {
    /// Start in the background, or in the foreground with --supervise.
    Start {
        config: PathBuf,
        /// Stay in the foreground, for use under a process supervisor.
        #[arg(long)]
        supervise: bool,
    },
    Stop {
        config: PathBuf,
    },
    Status {
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum BrokerCommand {
    /// Start in the background.
    Start,
    Stop,
    Restart,
    /// Run in the foreground.
    Run,
}

#[derive(Subcommand)]
enum MonitorView {
    /// Current queues and executing jobs.
    Queues,
    /// Last lines of a log: receiver, scheduler, socket or checker.
    Log {
        name: String,
        #[arg(long, default_value_t = 20)]
        lines: usize,
    },
    /// Master database rows.
    Query {
        #[arg(long)]
        solver: Option<String>,
        /// Rows whose sender contains this text.
        #[arg(long)]
        sender: Option<String>,
        /// Received at or after (YYYY-MM-DD or RFC 3339).
        #[arg(long)]
        from: Option<String>,
        /// Received before.
        #[arg(long)]
        to: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportPeriod {
    Daily,
    Weekly,
}

fn broker_config(cli: &Cli) -> Result<&Path> {
    match &cli.config {
        Some(p) => Ok(p),
        None => bail!(
            "this command needs the broker configuration: pass --config or set SOLVERHUB_CONFIG"
        ),
    }
}

fn read_body(path: &Path) -> Result<Vec<u8>> {
    if path == Path::new("-") {
        let mut body = Vec::new();
        io::stdin().read_to_end(&mut body)?;
        return Ok(body);
    }
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn print(text: &[u8]) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let client = Client::new(cli.broker.clone(), cli.user.clone());
    match &cli.command {
        Command::Submit {
            solver,
            body,
            out,
            raw,
            fields,
        } => {
            let opts = SubmitOptions {
                raw: *raw,
                quiet: false,
                out: out.clone(),
            };
            let (_, data) = match (body, solver) {
                (Some(path), _) => client::submit_body(&client, &read_body(path)?, &opts)?,
                (None, Some(key)) => {
                    let config = client::token_config(&client, key)?;
                    let f = client::build_fields(key, &config, fields)?;
                    client::submit_fields(&client, key, &f, &opts)?
                }
                (None, None) => bail!("give --solver or --body"),
            };
            client::write_results(&data, opts.out.as_deref())?;
        }
        Command::Solvers { admin } => {
            let request = if *admin {
                Request::AdminList
            } else {
                Request::SolverList
            };
            print(&client::call(&client, request)?)?;
        }
        Command::Results { number, out } => {
            let data = client::call(&client, Request::GetResults(*number))?;
            client::write_results(&data, out.as_deref())?;
        }
        Command::Config { solver } => {
            print(&client::call(&client, Request::Config(solver.clone()))?)?
        }
        Command::Help { solver } => print(&client::call(&client, Request::Help(solver.clone()))?)?,
        Command::RegisterSolver { manifest } => {
            print(client::register_solver(&client, manifest)?.as_bytes())?;
        }
        Command::Status {
            action,
            solver,
            password,
        } => {
            let action = match action {
                StatusAction::Enable => "enable",
                StatusAction::Disable => "disable",
                StatusAction::Delete => "delete",
            };
            let text = client::admin_job(
                &client,
                "STATUS",
                &[
                    ("solver_type", solver.solver_type().to_string()),
                    ("solver_id", solver.id().to_string()),
                    ("password", password.clone()),
                    ("action", action.to_string()),
                ],
            )?;
            print(text.as_bytes())?;
            return Ok(!text.starts_with("Refused"));
        }
        Command::Kill { number, password } => {
            let text = client::admin_job(
                &client,
                "KILL_JOB",
                &[
                    ("job_number", number.to_string()),
                    ("job_password", password.clone()),
                ],
            )?;
            print(text.as_bytes())?;
        }
        Command::Agent { command } => match command {
            AgentCommand::Start { config, supervise } => {
                if *supervise {
                    daemon::agent_run(config)?;
                } else {
                    daemon::agent_start(config)?;
                }
            }
            AgentCommand::Stop { config } => daemon::agent_stop(config)?,
            AgentCommand::Status { config } => daemon::agent_status(config)?,
        },
        Command::Broker { command } => {
            let path = broker_config(&cli)?;
            match command {
                BrokerCommand::Start => daemon::broker_start(path, false)?,
                BrokerCommand::Stop => daemon::broker_stop(path)?,
                BrokerCommand::Restart => {
                    daemon::broker_stop(path)?;
                    daemon::broker_start(path, false)?;
                }
                BrokerCommand::Run => daemon::broker_run(path)?,
            }
        }
        Command::Monitor { view } => {
            let (_, store) = local::open(broker_config(&cli)?)?;
            let text = match view {
                MonitorView::Queues => local::queues(&store),
                MonitorView::Log { name, lines } => local::log_tail(&store, name, *lines)?,
                MonitorView::Query {
                    solver,
                    sender,
                    from,
                    to,
                } => {
                    let filter = MasterFilter {
                        solver: solver.clone(),
                        sender: sender.clone(),
                        received_from: from.as_deref().map(local::parse_time).transpose()?,
                        received_to: to.as_deref().map(local::parse_time).transpose()?,
                    };
                    local::query(&store, &filter)?
                }
            };
            print(text.as_bytes())?;
        }
        Command::Report { period } => {
            let (_, store) = local::open(broker_config(&cli)?)?;
            let period = match period {
                ReportPeriod::Daily => Period::Day,
                ReportPeriod::Weekly => Period::Week,
            };
            print(local::report(&store, period)?.as_bytes())?;
        }
        Command::Checker {
            timeout,
            no_restart,
        } => {
            return local::checker(
                broker_config(&cli)?,
                Duration::from_secs(*timeout),
                !no_restart,
            );
        }
        Command::Clean { days } => {
            let (_, store) = local::open(broker_config(&cli)?)?;
            print(local::clean(&store, *days).as_bytes())?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("solverhub: {e:#}");
            ExitCode::FAILURE
        }
    }
}
