//! Application interface and the bundled simulations.
//!
//! An application owns its object registry, supplies initial payloads,
//! and runs jobs: compute jobs return new payloads for their write set,
//! parent jobs return a spawn batch.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::data::{DataError, LogicalObject, LogicalObjectId, ObjectRegistry};
use crate::graph::{IdBlock, JobId, JobSpec};
use crate::region::{GeometryError, Region, MAX_DIMS};
use crate::worker::translator::TranslateError;

pub mod diffusion2d;
pub mod oracle;
pub mod water1d;

pub use diffusion2d::{Diffusion2d, DiffusionConfig, InitialField};
pub use oracle::{serial_oracle, OracleRun};
pub use water1d::Water1d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("unknown job function {0:?}")]
    UnknownFunction(String),
    #[error("malformed params for {0}")]
    BadParams(String),
    #[error("spawn batch exceeds the granted id block")]
    IdsExhausted,
    #[error("invalid application config: {0}")]
    Config(String),
    #[error("{function} needs object {id:?} as input")]
    MissingInput { function: String, id: LogicalObjectId },
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// What a job sees when it runs: its read-set payloads and declared writes.
pub struct JobContext<'a> {
    pub job: JobId,
    pub function: &'a str,
    pub params: &'a [u8],
    pub inputs: &'a BTreeMap<LogicalObjectId, Vec<f64>>,
    pub writes: &'a [LogicalObjectId],
}

impl JobContext<'_> {
    pub fn input(&self, id: LogicalObjectId) -> Result<&[f64], AppError> {
        self.inputs
            .get(&id)
            .map(|v| v.as_slice())
            .ok_or_else(|| AppError::MissingInput { function: self.function.to_string(), id })
    }

    pub fn scalar(&self, id: LogicalObjectId) -> Result<f64, AppError> {
        Ok(self.input(id)?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Wrote(BTreeMap<LogicalObjectId, Vec<f64>>),
    Spawned(Vec<JobSpec>),
}

pub trait Application: Send + Sync {
    fn name(&self) -> &str;
    fn registry(&self) -> &ObjectRegistry;
    fn initial_payload(&self, object: &LogicalObject) -> Vec<f64>;
    /// The root parent job.
    fn main_job(&self, id: JobId) -> JobSpec;
    /// Runs one job. Parents receive the id block they may mint from.
    fn run(&self, ctx: &JobContext<'_>, ids: Option<IdBlock>) -> Result<JobOutcome, AppError>;
}

pub type SharedApp = Arc<dyn Application>;

/// Hands out consecutive ids from a parent's block.
pub struct IdMinter {
    next: u64,
    end: u64,
}

impl IdMinter {
    pub fn new(block: Option<IdBlock>) -> Self {
        match block {
            Some(b) => IdMinter { next: b.start, end: b.start + b.len },
            None => IdMinter { next: 0, end: 0 },
        }
    }

    pub fn mint(&mut self) -> Result<JobId, AppError> {
        if self.next >= self.end {
            return Err(AppError::IdsExhausted);
        }
        self.next += 1;
        Ok(JobId(self.next - 1))
    }
}

/// Job params are a short list of little-endian u64 words.
pub fn encode_params(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn decode_params(function: &str, bytes: &[u8], expected: usize) -> Result<Vec<u64>, AppError> {
    if bytes.len() != expected * 8 {
        return Err(AppError::BadParams(function.to_string()));
    }
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// The owned object of `variable` in partition `lin` that holds the
/// partition's centre cell.
pub fn central_object(reg: &ObjectRegistry, variable: &str, lin: u32) -> Result<LogicalObjectId, AppError> {
    let domain = reg.domain();
    let pbox = domain.partition_box(domain.partition_from_linear(lin))?;
    let mut centre = [0i64; MAX_DIMS];
    for (a, c) in centre.iter_mut().enumerate().take(pbox.dims()) {
        *c = pbox.lo()[a] + pbox.extent(a) / 2;
    }
    for id in reg.owned(variable, lin)? {
        if reg.get(*id)?.region.contains_cell(&centre) {
            return Ok(*id);
        }
    }
    Err(AppError::Config(format!("partition {lin} of {variable} has no central object")))
}

/// Face neighbours of `cell` that lie inside `bounds`.
pub fn neighbours_within(cell: [i64; MAX_DIMS], bounds: &Region) -> impl Iterator<Item = [i64; MAX_DIMS]> + '_ {
    (0..bounds.dims()).flat_map(move |a| {
        [-1i64, 1].into_iter().filter_map(move |d| {
            let mut n = cell;
            n[a] += d;
            bounds.contains_cell(&n).then_some(n)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        let p = encode_params(&[3, 0, u64::MAX]);
        assert_eq!(decode_params("f", &p, 3).unwrap(), vec![3, 0, u64::MAX]);
        assert!(decode_params("f", &p, 2).is_err());
    }

    #[test]
    fn minter_respects_block() {
        let mut m = IdMinter::new(Some(IdBlock { start: 10, len: 2 }));
        assert_eq!(m.mint().unwrap(), JobId(10));
        assert_eq!(m.mint().unwrap(), JobId(11));
        assert_eq!(m.mint(), Err(AppError::IdsExhausted));
    }
}
