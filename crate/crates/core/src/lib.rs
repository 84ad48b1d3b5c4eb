//! Shared pieces of the solverhub broker, agent and command-line tools.

pub mod archive;
pub mod job;
pub mod key;
pub mod lzw;
pub mod store;
pub mod token;
pub mod wire;

pub use job::{Interface, Job, JobState};
pub use key::SolverKey;
