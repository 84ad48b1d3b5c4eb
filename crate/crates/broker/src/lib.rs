//! The job broker: receiver, initializer, parser, scheduler, dispatcher and
//! socket server, all sharing one on-disk store.

pub mod admin;
pub mod config;
mod dispatch;
pub mod jobfiles;
pub mod ops;
mod pipeline;
pub mod registry;
pub mod restrict;
mod scheduler;
mod server;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;
use solverhub_core::store::{Store, StoreError};
use thiserror::Error;

pub use config::BrokerConfig;
pub use registry::Registry;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("registry: {0}")]
    Registry(String),
    #[error("cannot bind to {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Date in log lines, e.g. `Aug 8 16:38 UTC 1999`.
pub fn log_date() -> String {
    Utc::now().format("%b %-d %H:%M UTC %Y").to_string()
}

pub(crate) enum SchedMsg {
    Wake,
    Finished(u64),
    ConnectFailed(u64),
}

/// State shared by the broker threads.
pub(crate) struct Shared {
    pub config: BrokerConfig,
    pub store: Store,
    pub registry: Registry,
    pub shutdown: AtomicBool,
    pub scheduler: Mutex<mpsc::Sender<SchedMsg>>,
    /// Serializes parse completion so the scheduler sees parse order.
    pub parse_order: Mutex<u64>,
}

impl Shared {
    pub fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Relaxed)
    }

    /// Sleeps up to `d`; returns false if shutdown was requested meanwhile.
    pub fn nap(&self, d: Duration) -> bool {
        let until = Instant::now() + d;
        while Instant::now() < until {
            if self.stopping() {
                return false;
            }
            thread::sleep((until - Instant::now()).min(Duration::from_millis(25)));
        }
        !self.stopping()
    }

    pub fn notify(&self, msg: SchedMsg) {
        let tx = self.scheduler.lock().unwrap_or_else(|e| e.into_inner());
        let _ = tx.send(msg);
    }
}

/// A running broker inside this process.
pub struct BrokerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Store {
        &self.shared.store
    }

    pub fn registry(&self) -> &Registry {
        &self.shared.registry
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.shared.config
    }

    /// Blocks until every broker thread has exited.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        self.shared.notify(SchedMsg::Wake);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub struct Broker;

impl Broker {
    /// Initializes the store, installs the admin solvers, binds the listener
    /// and starts the receiver, scheduler and socket server threads.
    pub fn start(config: BrokerConfig) -> Result<BrokerHandle, BrokerError> {
        let store = Store::init(&config.server_var)?;
        let registry = Registry::new(&store);
        admin::install(&store, &registry)?;
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            config,
            store,
            registry,
            shutdown: AtomicBool::new(false),
            scheduler: Mutex::new(tx),
            parse_order: Mutex::new(0),
        });
        let listener = server::bind(&shared)?;
        let addr = listener.local_addr()?;

        let mut threads = Vec::new();
        let s = Arc::clone(&shared);
        threads.push(
            thread::Builder::new()
                .name("receiver".into())
                .spawn(move || pipeline::receiver_loop(s))?,
        );
        let s = Arc::clone(&shared);
        threads.push(
            thread::Builder::new()
                .name("scheduler".into())
                .spawn(move || scheduler::run(s, rx))?,
        );
        let s = Arc::clone(&shared);
        threads.push(
            thread::Builder::new()
                .name("socket-server".into())
                .spawn(move || server::serve(s, listener))?,
        );
        Ok(BrokerHandle {
            addr,
            shared,
            threads,
        })
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// A store with the admin solvers installed and a one-category tree;
    /// no threads are started.
    pub fn shared() -> (tempfile::TempDir, Arc<Shared>) {
        let tmp = tempfile::tempdir().unwrap();
        let tree = tmp.path().join("solver_tree");
        std::fs::write(&tree, "Miscellaneous|misc\nLinear Programming|lp\n").unwrap();
        let config = BrokerConfig::new("Test Server", &tmp.path().join("var"), &tree);
        let store = Store::init(&config.server_var).unwrap();
        let registry = Registry::new(&store);
        admin::install(&store, &registry).unwrap();
        let (tx, _rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            config,
            store,
            registry,
            shutdown: AtomicBool::new(false),
            scheduler: Mutex::new(tx),
            parse_order: Mutex::new(0),
        });
        (tmp, shared)
    }
}
