//! Job metadata and the controller's job graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LogicalObjectId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u64);

/// A computation unit and its metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: JobId,
    pub function: String,
    pub params: Vec<u8>,
    pub read: BTreeSet<LogicalObjectId>,
    pub write: BTreeSet<LogicalObjectId>,
    pub before: BTreeSet<JobId>,
    /// Set on jobs that may submit spawn batches.
    pub parent: bool,
    /// For parents: every object the parent or anything it spawns may touch.
    /// This is what a checkpoint taken while the parent is pending must save.
    pub access: BTreeSet<LogicalObjectId>,
    /// Outer-loop iteration this parent starts, if it is a loop head.
    pub iteration: Option<u64>,
}

impl JobSpec {
    pub fn compute(id: JobId, function: &str) -> Self {
        JobSpec {
            id,
            function: function.to_string(),
            params: Vec::new(),
            read: BTreeSet::new(),
            write: BTreeSet::new(),
            before: BTreeSet::new(),
            parent: false,
            access: BTreeSet::new(),
            iteration: None,
        }
    }

    pub fn parent(id: JobId, function: &str) -> Self {
        JobSpec { parent: true, ..JobSpec::compute(id, function) }
    }

    pub fn with_params(mut self, params: Vec<u8>) -> Self {
        self.params = params;
        self
    }

    pub fn reads<I: IntoIterator<Item = LogicalObjectId>>(mut self, ids: I) -> Self {
        self.read.extend(ids);
        self
    }

    pub fn writes<I: IntoIterator<Item = LogicalObjectId>>(mut self, ids: I) -> Self {
        self.write.extend(ids);
        self
    }

    pub fn after<I: IntoIterator<Item = JobId>>(mut self, ids: I) -> Self {
        self.before.extend(ids);
        self
    }

    pub fn accessing<I: IntoIterator<Item = LogicalObjectId>>(mut self, ids: I) -> Self {
        self.access.extend(ids);
        self
    }

    pub fn loop_head(mut self, iteration: u64) -> Self {
        self.iteration = Some(iteration);
        self
    }

    /// read ∪ write, ascending.
    pub fn touched_objects(&self) -> BTreeSet<LogicalObjectId> {
        self.read.union(&self.write).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobStatus {
    Spawned,
    Scheduled,
    Running,
    Done,
}

/// Contiguous block of job ids granted to one parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdBlock {
    pub start: u64,
    pub len: u64,
}

impl IdBlock {
    pub fn contains(&self, id: JobId) -> bool {
        id.0 >= self.start && id.0 < self.start + self.len
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate job id {0:?}")]
    DuplicateId(JobId),
    #[error("job {job:?} names unknown before-job {missing:?}")]
    DanglingBefore { job: JobId, missing: JobId },
    #[error("batch introduces a cycle through {0:?}")]
    Cycle(JobId),
    #[error("spawner {0:?} is not a running parent job")]
    NotParent(JobId),
    #[error("job id {id:?} outside the spawner's block {block:?}")]
    OutsideBlock { id: JobId, block: Option<IdBlock> },
    #[error("unknown job {0:?}")]
    UnknownJob(JobId),
    #[error("status of {id:?} cannot go from {from:?} to {to:?}")]
    StatusRegression { id: JobId, from: JobStatus, to: JobStatus },
}

#[derive(Clone, Debug)]
struct Node {
    spec: JobSpec,
    status: JobStatus,
}

#[derive(Clone, Debug, Default)]
pub struct JobGraph {
    nodes: BTreeMap<JobId, Node>,
    blocks: BTreeMap<JobId, IdBlock>,
}

impl JobGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: JobId) -> Option<&JobSpec> {
        self.nodes.get(&id).map(|n| &n.spec)
    }

    pub fn status(&self, id: JobId) -> Option<JobStatus> {
        self.nodes.get(&id).map(|n| n.status)
    }

    pub fn jobs(&self) -> impl Iterator<Item = (&JobSpec, JobStatus)> {
        self.nodes.values().map(|n| (&n.spec, n.status))
    }

    /// Inserts a job with no spawner (the application's `main`).
    pub fn submit_root(&mut self, spec: JobSpec) -> Result<JobId, GraphError> {
        if self.nodes.contains_key(&spec.id) {
            return Err(GraphError::DuplicateId(spec.id));
        }
        if let Some(b) = spec.before.iter().find(|b| !self.nodes.contains_key(b)) {
            return Err(GraphError::DanglingBefore { job: spec.id, missing: *b });
        }
        if spec.before.contains(&spec.id) {
            return Err(GraphError::Cycle(spec.id));
        }
        let id = spec.id;
        self.nodes.insert(id, Node { spec, status: JobStatus::Spawned });
        Ok(id)
    }

    pub fn grant_block(&mut self, parent: JobId, block: IdBlock) {
        self.blocks.insert(parent, block);
    }

    pub fn block_of(&self, parent: JobId) -> Option<IdBlock> {
        self.blocks.get(&parent).copied()
    }

    /// Validates and appends a spawn batch. Returns the accepted ids in a
    /// topological order of the batch, lowest id first among ready ones.
    pub fn submit_batch(&mut self, batch: Vec<JobSpec>, spawner: JobId) -> Result<Vec<JobId>, GraphError> {
        let node = self.nodes.get(&spawner).ok_or(GraphError::UnknownJob(spawner))?;
        if !node.spec.parent || !matches!(node.status, JobStatus::Scheduled | JobStatus::Running) {
            return Err(GraphError::NotParent(spawner));
        }
        let block = self.blocks.get(&spawner).copied();

        let mut in_batch: BTreeMap<JobId, usize> = BTreeMap::new();
        for (i, job) in batch.iter().enumerate() {
            if !block.is_some_and(|b| b.contains(job.id)) {
                return Err(GraphError::OutsideBlock { id: job.id, block });
            }
            if self.nodes.contains_key(&job.id) || in_batch.insert(job.id, i).is_some() {
                return Err(GraphError::DuplicateId(job.id));
            }
        }
        for job in &batch {
            for b in &job.before {
                if !in_batch.contains_key(b) && !self.nodes.contains_key(b) {
                    return Err(GraphError::DanglingBefore { job: job.id, missing: *b });
                }
            }
        }

        // Kahn's algorithm restricted to intra-batch edges.
        let mut indegree: BTreeMap<JobId, usize> = BTreeMap::new();
        let mut dependents: BTreeMap<JobId, Vec<JobId>> = BTreeMap::new();
        for job in &batch {
            let deg = job.before.iter().filter(|b| in_batch.contains_key(b)).count();
            indegree.insert(job.id, deg);
            for b in job.before.iter().filter(|b| in_batch.contains_key(b)) {
                dependents.entry(*b).or_default().push(job.id);
            }
        }
        let mut ready: BTreeSet<JobId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(batch.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for dep in dependents.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(dep).expect("dependent in batch");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*dep);
                }
            }
        }
        if order.len() != batch.len() {
            let stuck = indegree.iter().find(|(id, _)| !order.contains(id)).map(|(id, _)| *id).unwrap();
            return Err(GraphError::Cycle(stuck));
        }

        for job in batch {
            self.nodes.insert(job.id, Node { spec: job, status: JobStatus::Spawned });
        }
        Ok(order)
    }

    pub fn set_status(&mut self, id: JobId, status: JobStatus) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownJob(id))?;
        if status < node.status {
            return Err(GraphError::StatusRegression { id, from: node.status, to: status });
        }
        node.status = status;
        Ok(())
    }

    fn before_done(&self, spec: &JobSpec) -> bool {
        spec.before.iter().all(|b| self.nodes.get(b).is_none_or(|n| n.status == JobStatus::Done))
    }

    /// Jobs whose before set is fully done and which are not yet scheduled.
    pub fn ready_jobs(&self) -> BTreeSet<JobId> {
        self.nodes
            .values()
            .filter(|n| n.status == JobStatus::Spawned && self.before_done(&n.spec))
            .map(|n| n.spec.id)
            .collect()
    }

    pub fn is_ready(&self, id: JobId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.status == JobStatus::Spawned && self.before_done(&n.spec))
    }

    /// Jobs not yet done.
    pub fn frontier(&self) -> Vec<&JobSpec> {
        self.nodes.values().filter(|n| n.status != JobStatus::Done).map(|n| &n.spec).collect()
    }

    pub fn all_done(&self) -> bool {
        self.nodes.values().all(|n| n.status == JobStatus::Done)
    }

    /// Replaces the graph with a saved frontier (checkpoint rewind).
    /// Before-references to jobs outside the frontier are dropped since
    /// those jobs completed before the snapshot.
    pub fn replace_with(&mut self, frontier: Vec<JobSpec>) {
        let ids: BTreeSet<JobId> = frontier.iter().map(|j| j.id).collect();
        self.nodes.clear();
        self.blocks.clear();
        for mut spec in frontier {
            spec.before.retain(|b| ids.contains(b));
            self.nodes.insert(spec.id, Node { spec, status: JobStatus::Spawned });
        }
    }

    /// Drops done jobs that nothing pending refers to.
    pub fn prune_done(&mut self) {
        let referenced: BTreeSet<JobId> = self
            .nodes
            .values()
            .filter(|n| n.status != JobStatus::Done)
            .flat_map(|n| n.spec.before.iter().copied())
            .collect();
        self.nodes.retain(|id, n| n.status != JobStatus::Done || referenced.contains(id));
        let live: BTreeSet<JobId> = self.nodes.keys().copied().collect();
        self.blocks.retain(|id, _| live.contains(id));
    }

    /// `true` when `a` must precede `b` through before relations.
    pub fn precedes(&self, a: JobId, b: JobId) -> bool {
        let mut stack = vec![b];
        let mut seen = BTreeSet::new();
        while let Some(j) = stack.pop() {
            if let Some(n) = self.nodes.get(&j) {
                for p in &n.spec.before {
                    if *p == a {
                        return true;
                    }
                    if seen.insert(*p) {
                        stack.push(*p);
                    }
                }
            }
        }
        false
    }
}
