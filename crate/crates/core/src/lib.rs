//! Controller/worker runtime for grid-partitioned iterative simulations.
//!
//! Applications describe their work as jobs with read, write and before
//! sets over disjoint geometric data objects. A central [`controller`]
//! assigns jobs to workers, inserts copy jobs for ghost exchange, moves
//! partitions away from stragglers and checkpoints the job graph so a
//! failed worker can be rewound. [`worker`] executes jobs; [`transport`]
//! carries messages over TCP or over a deterministic simulated network.

pub mod region;
pub mod data;
pub mod graph;
pub mod transport;
pub mod app;
pub mod worker;
pub mod controller;
pub mod metrics;
pub mod config;
pub mod driver;
