//! Single owner of queues, station slots and restriction history.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;

use chrono::{Duration as ChronoDuration, Utc};
use solverhub_core::store::{queues_snapshot, Disposition, Log, MasterFilter};
use solverhub_core::wire::CLEAR_SCREEN;
use solverhub_core::{Interface, Job, JobState, SolverKey};

use crate::jobfiles::{self, append_out, finalize, read_text};
use crate::restrict::{History, Verdict};
use crate::{dispatch, log_date, SchedMsg, Shared};

#[derive(Debug, Clone)]
pub(crate) struct Queued {
    pub number: u64,
    pub key: SolverKey,
    pub seq: u64,
    /// Station hosts that refused a connection for this job.
    pub tried: Vec<String>,
}

struct Running {
    job: Queued,
    host: Option<String>,
}

struct Scheduler {
    shared: Arc<Shared>,
    queues: BTreeMap<SolverKey, VecDeque<Queued>>,
    running: BTreeMap<u64, Running>,
    slots: HashMap<(String, SolverKey), u32>,
    history: History,
}

pub(crate) fn run(shared: Arc<Shared>, rx: Receiver<SchedMsg>) {
    shared.store.log(
        Log::Scheduler,
        &format!("scheduler: Restart on {}.", log_date()),
    );
    let mut s = Scheduler {
        history: rebuild_history(&shared),
        shared,
        queues: BTreeMap::new(),
        running: BTreeMap::new(),
        slots: HashMap::new(),
    };
    s.write_snapshot();
    let poll = s.shared.config.scheduler_poll();
    loop {
        match rx.recv_timeout(poll) {
            Ok(msg) => s.handle(msg),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        while let Ok(msg) = rx.try_recv() {
            s.handle(msg);
        }
        if s.shared.stopping() {
            break;
        }
        s.collect();
        s.dispatch_ready();
        s.write_snapshot();
    }
}

/// Accepted jobs of the last month, so restarts keep counting.
fn rebuild_history(shared: &Shared) -> History {
    let mut history = History::default();
    let filter = MasterFilter {
        received_from: Some(Utc::now() - ChronoDuration::days(30)),
        ..Default::default()
    };
    if let Ok(records) = shared.store.query_master(&filter) {
        for r in records {
            if r.disposition != Disposition::Rejected && !r.solver_key.is_empty() {
                history.record(&r.solver_key, &r.sender_tag, r.received);
            }
        }
    }
    history
}

impl Scheduler {
    fn handle(&mut self, msg: SchedMsg) {
        match msg {
            SchedMsg::Wake => {}
            SchedMsg::Finished(n) => {
                if let Some(r) = self.running.remove(&n) {
                    self.release(&r);
                }
            }
            SchedMsg::ConnectFailed(n) => {
                if let Some(mut r) = self.running.remove(&n) {
                    self.release(&r);
                    if let Some(host) = r.host.take() {
                        self.shared.store.log(
                            Log::Scheduler,
                            &format!("scheduler: job {n} could not reach {host}; trying another station."),
                        );
                        r.job.tried.push(host);
                    }
                    self.queues
                        .entry(r.job.key.clone())
                        .or_default()
                        .push_front(r.job);
                }
            }
        }
    }

    fn release(&mut self, r: &Running) {
        let Some(host) = &r.host else {
            return;
        };
        let slot = (host.clone(), r.job.key.clone());
        let count = self
            .slots
            .get(&slot)
            .copied()
            .unwrap_or(0)
            .saturating_sub(1);
        if count == 0 {
            self.slots.remove(&slot);
        } else {
            self.slots.insert(slot, count);
        }
        self.write_station_count(host, &r.job.key, count);
    }

    fn write_station_count(&self, host: &str, key: &SolverKey, count: u32) {
        let path = self
            .shared
            .store
            .stations_dir()
            .join(format!("{host}-{key}"));
        if count == 0 {
            let _ = fs::remove_file(path);
        } else if let Err(e) = self
            .shared
            .store
            .write_atomic(&path, format!("{count}\n").as_bytes())
        {
            log::error!("cannot update {}: {e}", path.display());
        }
    }

    /// Takes parsed jobs from the JOBS spool in parse order.
    fn collect(&mut self) {
        let entries = match self.shared.store.jobs_collect() {
            Ok(e) => e,
            Err(e) => {
                log::warn!("scheduler: JOBS spool: {e}");
                return;
            }
        };
        let mut jobs: Vec<Queued> = entries
            .into_iter()
            .filter_map(|(name, body)| {
                let number = name.strip_prefix("job.")?.parse().ok()?;
                let text = String::from_utf8_lossy(&body);
                let mut lines = text.lines();
                let key = lines.next()?.parse().ok()?;
                let seq = lines
                    .next()
                    .and_then(|s| s.trim().parse().ok())
                    .unwrap_or(0);
                Some(Queued {
                    number,
                    key,
                    seq,
                    tried: Vec::new(),
                })
            })
            .collect();
        jobs.sort_by_key(|j| (j.seq, j.number));
        for job in jobs {
            self.admit(job);
        }
    }

    fn admit(&mut self, job: Queued) {
        let store = &self.shared.store;
        let dir = store.job_dir(job.number);
        let sender = read_text(&dir, jobfiles::ADDRESS).unwrap_or_default();
        let rules = match self.shared.registry.load(&job.key) {
            Ok(Some(reg)) => reg.restrictions,
            _ => {
                self.reject(
                    job.number,
                    &format!(
                        "Job {} cannot be scheduled: solver {} is no longer registered.\n",
                        job.number, job.key
                    ),
                    Disposition::Failed,
                );
                return;
            }
        };
        if let Verdict::Deny(rule) =
            self.history
                .admit(&rules, &job.key.to_string(), &sender, Utc::now())
        {
            store.log(
                Log::Scheduler,
                &format!(
                    "scheduler: job {} rejected by restriction `{rule}`.",
                    job.number
                ),
            );
            self.reject(
                job.number,
                &format!(
                    "Job {} was rejected: the usage restriction `{rule}` for solver {} has been reached.\nPlease try again later.\n",
                    job.number, job.key
                ),
                Disposition::Rejected,
            );
            return;
        }
        let password = read_text(&dir, jobfiles::PASSWORD).unwrap_or_default();
        let queue = self.queues.entry(job.key.clone()).or_default();
        queue.push_back(job.clone());
        let text = format!(
            "Welcome to {}!\n{CLEAR_SCREEN}\nScheduling:\n  You are job #{}.\n  Your job password is {password}.\n{}",
            self.shared.config.server_name,
            job.number,
            self.queue_summary()
        );
        append_out(&dir, &text);
    }

    fn queue_summary(&self) -> String {
        let mut out = String::from("  Solver Queues:\n");
        let mut any = false;
        for (key, q) in &self.queues {
            if q.is_empty() {
                continue;
            }
            any = true;
            let nums: Vec<String> = q.iter().map(|j| j.number.to_string()).collect();
            out.push_str(&format!("    {key}: {}\n", nums.join(" ")));
        }
        if !any {
            out.push_str("    No jobs in queue.\n");
        }
        out.push_str("  Jobs Executing:\n");
        if self.running.is_empty() {
            out.push_str("    No jobs executing.\n");
        }
        for (n, r) in &self.running {
            out.push_str(&format!("    {}: {n}\n", r.job.key));
        }
        out
    }

    fn reject(&self, number: u64, text: &str, disposition: Disposition) {
        let dir = self.shared.store.job_dir(number);
        append_out(
            &dir,
            &format!(
                "{CLEAR_SCREEN}\nScheduling:\n  {}\n",
                text.lines().next().unwrap_or("")
            ),
        );
        let note = match disposition {
            Disposition::Rejected => "restricted",
            _ => "not scheduled",
        };
        finalize(&self.shared.store, number, disposition, text, note);
    }

    /// Stations for `key` that have a registered agent port, with capacity.
    fn stations(&self, key: &SolverKey) -> Vec<(String, u16, u32)> {
        let Ok(Some(reg)) = self.shared.registry.load(key) else {
            return Vec::new();
        };
        let ports = self.shared.registry.station_ports();
        reg.stations
            .iter()
            .filter_map(|s| {
                ports
                    .iter()
                    .find(|p| p.key == *key && p.host.eq_ignore_ascii_case(&s.host))
                    .map(|p| (p.host.clone(), p.port, s.capacity))
            })
            .collect()
    }

    fn dispatch_ready(&mut self) {
        let keys: Vec<SolverKey> = self.queues.keys().cloned().collect();
        for key in keys {
            while let Some(front) = self.queues.get(&key).and_then(|q| q.front()).cloned() {
                if key.is_admin() {
                    self.pop(&key);
                    self.start_admin(front);
                    continue;
                }
                let stations = self.stations(&key);
                if stations.is_empty() {
                    self.pop(&key);
                    self.reject(
                        front.number,
                        &format!(
                            "Job {} cannot be scheduled: no solver station for {key} has registered with the server.\n",
                            front.number
                        ),
                        Disposition::Failed,
                    );
                    continue;
                }
                let untried: Vec<&(String, u16, u32)> = stations
                    .iter()
                    .filter(|(h, _, _)| !front.tried.iter().any(|t| t.eq_ignore_ascii_case(h)))
                    .collect();
                if untried.is_empty() {
                    self.pop(&key);
                    self.reject(
                        front.number,
                        &format!(
                            "Job {} cannot be scheduled: none of the solver stations for {key} could be contacted.\n",
                            front.number
                        ),
                        Disposition::Failed,
                    );
                    continue;
                }
                let free = untried.into_iter().find(|(h, _, cap)| {
                    self.slots
                        .get(&(h.clone(), key.clone()))
                        .copied()
                        .unwrap_or(0)
                        < *cap
                });
                let Some((host, port, _)) = free.cloned() else {
                    break;
                };
                self.pop(&key);
                self.start_remote(front, host, port);
            }
        }
        self.queues.retain(|_, q| !q.is_empty());
    }

    fn pop(&mut self, key: &SolverKey) {
        if let Some(q) = self.queues.get_mut(key) {
            q.pop_front();
        }
    }

    fn start_admin(&mut self, job: Queued) {
        self.shared.store.log(
            Log::Scheduler,
            &format!(
                "scheduler: job {} ({}) sent to localhost.",
                job.number, job.key
            ),
        );
        let number = job.number;
        let key = job.key.clone();
        self.running.insert(number, Running { job, host: None });
        let shared = Arc::clone(&self.shared);
        let spawned = thread::Builder::new()
            .name(format!("admin-{number}"))
            .spawn(move || dispatch::run_admin(&shared, number, &key));
        if let Err(e) = spawned {
            log::error!("cannot start admin job {number}: {e}");
        }
    }

    fn start_remote(&mut self, job: Queued, host: String, port: u16) {
        let slot = (host.clone(), job.key.clone());
        let count = self.slots.get(&slot).copied().unwrap_or(0) + 1;
        self.slots.insert(slot, count);
        self.write_station_count(&host, &job.key, count);
        self.shared.store.log(
            Log::Scheduler,
            &format!(
                "scheduler: job {} ({}) sent to {host}:{port}.",
                job.number, job.key
            ),
        );
        let number = job.number;
        let key = job.key.clone();
        self.running.insert(
            number,
            Running {
                job,
                host: Some(host.clone()),
            },
        );
        let shared = Arc::clone(&self.shared);
        let spawned = thread::Builder::new()
            .name(format!("dispatch-{number}"))
            .spawn(move || dispatch::run_remote(&shared, number, &key, &host, port));
        if let Err(e) = spawned {
            log::error!("cannot start dispatcher for job {number}: {e}");
        }
    }

    fn write_snapshot(&self) {
        let as_jobs = |items: Vec<(&Queued, JobState)>| -> Vec<Job> {
            items
                .into_iter()
                .map(|(q, state)| {
                    let mut job = Job::new(q.number, Interface::Local, Utc::now());
                    job.solver_key = q.key.to_string();
                    job.state = state;
                    job
                })
                .collect()
        };
        let queued = as_jobs(
            self.queues
                .values()
                .flatten()
                .map(|q| (q, JobState::Queued))
                .collect(),
        );
        let executing = as_jobs(
            self.running
                .values()
                .map(|r| (&r.job, JobState::Executing))
                .collect(),
        );
        let text = queues_snapshot(&queued, &executing);
        let path = self.shared.store.queues_path();
        if fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            if let Err(e) = self.shared.store.write_queues(&queued, &executing) {
                log::error!("cannot write queues: {e}");
            }
        }
    }
}
