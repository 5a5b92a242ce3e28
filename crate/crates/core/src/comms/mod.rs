//! Communication layer: graph topologies, consensus weights and the
//! in-process message fabric that emulates lossy, delayed links.

mod fabric;
mod topology;

pub use fabric::{
    bandwidth_report, read_message_log, write_message_log, BandwidthReport, Channel, Endpoint, Fabric, LinkModel,
    LinkStats, MessageRecord, Received, Session, Wire, ENVELOPE_BYTES,
};
pub use topology::{build_topology, metropolis_weights, Topology, TopologyKind, WeightMatrix};

use thiserror::Error;

use crate::runtime::BarrierError;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CommsError {
    #[error("fleet must have at least one agent")]
    EmptyFleet,
    #[error("communication graph is disconnected")]
    Disconnected,
    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),
    #[error("star hub {hub} out of range for {n} agents")]
    InvalidHub { hub: usize, n: usize },
    #[error("unknown topology kind '{0}'")]
    UnknownTopology(String),
    #[error("invalid link model: {0}")]
    InvalidLink(String),
    #[error("agent {reader} tried to read the slot of non-neighbour {owner}")]
    NotNeighbour { reader: usize, owner: usize },
    #[error("protocol error: agent {reader} expected (session, round) {expected:?} from agent {sender}, found {found:?}")]
    RoundMismatch { reader: usize, sender: usize, expected: (u64, u64), found: Option<(u64, u64)> },
    #[error(transparent)]
    Barrier(#[from] BarrierError),
}
