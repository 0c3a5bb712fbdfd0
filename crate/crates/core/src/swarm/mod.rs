//! Collaborative data-parallel training rounds.

pub mod aggregate;
pub mod auth;
pub mod ledger;
pub mod local;
pub mod partition;
pub mod round;
pub mod sampler;
pub mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::optim::OptimError;
use crate::tasks::TaskError;
use crate::tensor::TensorError;

pub use aggregate::{aggregate, AggregationKind, AggregationPolicy, Contribution};
pub use auth::{authenticate, Allowlist, AuthDecision};
pub use ledger::{Ledger, LedgerEntry};
pub use local::{run_round, LocalPeer, Loopback, NodeId, RoundOutcome, SwarmConfig, Topology, Transport};
pub use round::{should_trigger, RoundPhase, RoundState};
pub use sampler::SampleStream;
pub use wire::{Member, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub u32);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "peer-{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SwarmError {
    #[error("round has no contributions")]
    EmptyRound,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid aggregation policy: {0}")]
    InvalidPolicy(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("malformed message: {0}")]
    Wire(String),
    #[error("round {round_id} aborted: {reason}")]
    RoundAborted { round_id: u64, reason: String },
    #[error("parameter hashes diverged in round {round_id}")]
    HashMismatch { round_id: u64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
