//! Independent Q-learning laboratory.
//!
//! A self-contained multi-agent reinforcement-learning testbed built around
//! one question: how do you keep experience replay useful when every agent's
//! "environment" contains other agents whose policies drift over training?
//!
//! The crate provides:
//!
//! - [`nn`]: a minimal feed-forward / GRU Q-network core with hand-written
//!   backprop (including BPTT over full episodes), an RMS-style optimizer and
//!   a finite-difference gradient checker.
//! - [`env`]: a deterministic, seedable grid-world skirmish between two teams
//!   of identical ranged units, plus a tiny cooperative matrix game with an
//!   exact value-iteration solver used as a convergence oracle.
//! - [`replay`]: an episodic replay memory whose stored steps carry the
//!   behaviour probabilities recorded at collection time.
//! - [`agents`]: independent Q-learners with an epsilon-greedy schedule,
//!   importance-weighted replay corrections and fingerprint-augmented
//!   observations.
//! - [`analysis`]: post-hoc diagnostics (value-vs-epsilon sweeps, linear
//!   probes of recurrent hidden states, cross-seed aggregation).
//! - [`cli`]: the experiment runner binding it all together.

pub mod agents;
pub mod analysis;
pub mod cli;
pub mod env;
pub mod nn;
pub mod replay;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration detected at construction time.
    #[error("configuration error: {0}")]
    Config(String),
    /// Shape or dimension mismatch between values that must agree.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A replay-memory consistency gate rejected an episode.
    #[error("replay rejected: {0}")]
    Replay(String),
    /// Malformed or unreadable artifact on disk.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
