//! Wire format and the two transports: a deterministic in-process
//! network with fault injection, and TCP sockets.

pub mod message;
pub mod sim;
pub mod socket;
pub mod wire;

pub use message::{decode, encode, Binding, DoneKind, ExecuteJob, Message, ProfileReport, ShardOp, WorkerEntry};
pub use wire::WireError;

use crate::data::WorkerId;

/// An endpoint of the controller/worker network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Controller,
    Worker(WorkerId),
}

impl std::fmt::Display for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Node::Controller => write!(f, "C"),
            Node::Worker(w) => write!(f, "W{w}"),
        }
    }
}
