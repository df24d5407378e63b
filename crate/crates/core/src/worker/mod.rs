//! Worker runtime as a sans-IO state machine.
//!
//! The worker holds one instance per logical object it has seen, tracks
//! every locally assigned job (compute jobs, both halves of copy jobs,
//! shard saves) with a count of unfinished runtime predecessors, and
//! starts jobs as their counts reach zero. Inputs are messages, task
//! completions and clock ticks; outputs are messages to send and tasks to
//! start. Running a task is the caller's business: the simulated driver
//! runs it inline and charges virtual time, the socket driver runs it on
//! a thread pool.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::app::{Application, JobContext, JobOutcome};
use crate::data::{LogicalObjectId, WorkerId};
use crate::graph::{IdBlock, JobId, JobSpec};
use crate::transport::{Binding, DoneKind, ExecuteJob, Message, Node, ProfileReport, ShardOp, WorkerEntry};

pub mod shard;
pub mod translator;

pub use shard::{ShardError, ShardStore};
pub use translator::TranslatorView;

pub const SECOND_NS: u64 = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("duplicate job id {0:?}")]
    DuplicateJob(JobId),
    #[error("job {job:?} waits on {missing:?}, which this worker never saw")]
    UnknownPredecessor { job: JobId, missing: JobId },
    #[error("job {job:?} expected {object:?} at version {expected}, found {found:?}")]
    VersionMismatch { job: JobId, object: LogicalObjectId, expected: u64, found: Option<u64> },
    #[error("copy {0:?} has identical source and destination")]
    SelfCopy(JobId),
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
    #[error("job {0:?} failed: {1}")]
    JobFailed(JobId, String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerTiming {
    pub heartbeat_ns: u64,
    pub window_ns: u64,
}

impl Default for WorkerTiming {
    fn default() -> Self {
        WorkerTiming { heartbeat_ns: SECOND_NS, window_ns: 2 * SECOND_NS }
    }
}

/// Work handed to an executor.
#[derive(Clone, Debug)]
pub struct ComputeTask {
    pub job: JobId,
    pub epoch: u64,
    pub kind: TaskKind,
    /// Elements read plus elements written; the simulated cost basis.
    pub work_units: u64,
}

#[derive(Clone, Debug)]
pub enum TaskKind {
    Job {
        function: String,
        params: Vec<u8>,
        inputs: BTreeMap<LogicalObjectId, Vec<f64>>,
        writes: Vec<LogicalObjectId>,
        id_block: Option<IdBlock>,
    },
    Save {
        checkpoint: u64,
        entries: Vec<(Binding, Vec<f64>)>,
    },
}

#[derive(Clone, Debug)]
pub enum TaskResult {
    Wrote(BTreeMap<LogicalObjectId, Vec<f64>>),
    Spawned(Vec<JobSpec>),
    Saved { bytes: u64 },
    Failed(String),
}

impl ComputeTask {
    pub fn is_save(&self) -> bool {
        matches!(self.kind, TaskKind::Save { .. })
    }

    /// Payload bytes of a save task.
    pub fn save_bytes(&self) -> u64 {
        match &self.kind {
            TaskKind::Save { entries, .. } => entries.iter().map(|(_, p)| 8 * p.len() as u64).sum(),
            TaskKind::Job { .. } => 0,
        }
    }

    pub fn run(&self, app: &dyn Application, store: Option<&ShardStore>) -> TaskResult {
        match &self.kind {
            TaskKind::Job { function, params, inputs, writes, id_block } => {
                let ctx = JobContext { job: self.job, function, params, inputs, writes };
                match app.run(&ctx, *id_block) {
                    Ok(JobOutcome::Wrote(out)) => TaskResult::Wrote(out),
                    Ok(JobOutcome::Spawned(batch)) => TaskResult::Spawned(batch),
                    Err(e) => TaskResult::Failed(e.to_string()),
                }
            }
            TaskKind::Save { checkpoint, entries } => {
                let Some(store) = store else {
                    return TaskResult::Failed("worker has no durable store".into());
                };
                let borrowed: Vec<(Binding, &[f64])> = entries.iter().map(|(b, p)| (*b, p.as_slice())).collect();
                match store.save(*checkpoint, &borrowed) {
                    Ok(bytes) => TaskResult::Saved { bytes },
                    Err(e) => TaskResult::Failed(e.to_string()),
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum WorkerInput {
    Message(Message),
    TaskDone { job: JobId, epoch: u64, result: TaskResult },
    Tick,
}

#[derive(Clone, Debug)]
pub enum WorkerOutput {
    Send { to: Node, msg: Message },
    Start(ComputeTask),
    /// Peer directory changed; socket transports reconnect from this.
    Peers(Vec<WorkerEntry>),
    Exit,
}

#[derive(Clone, Debug)]
enum PendingKind {
    Execute(ExecuteJob),
    Send { object: LogicalObjectId, version: u64, to: WorkerId },
    Receive { object: LogicalObjectId, version: u64, from: WorkerId },
    Save { checkpoint: u64, objects: Vec<Binding> },
}

#[derive(Clone, Debug)]
struct Pending {
    kind: PendingKind,
    remaining: usize,
}

#[derive(Clone, Debug)]
struct Instance {
    version: u64,
    payload: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct ProfileWindow {
    index: u64,
    start: u64,
    compute_ns: u64,
    blocked_ns: u64,
    blocked_on: BTreeMap<WorkerId, u64>,
    work_units: u64,
}

pub struct Worker {
    id: WorkerId,
    app: Arc<dyn Application>,
    store: Option<ShardStore>,
    threads: usize,
    timing: WorkerTiming,
    epoch: u64,
    now: u64,
    instances: BTreeMap<LogicalObjectId, Instance>,
    completed: BTreeSet<JobId>,
    pending: BTreeMap<JobId, Pending>,
    dependents: BTreeMap<JobId, Vec<JobId>>,
    ready: BTreeSet<JobId>,
    running: BTreeMap<JobId, u64>,
    copy_data: BTreeMap<JobId, (LogicalObjectId, u64, Vec<f64>)>,
    window: ProfileWindow,
    last_account: u64,
    last_heartbeat: u64,
    terminated: bool,
}

impl Worker {
    pub fn new(id: WorkerId, app: Arc<dyn Application>, store: Option<ShardStore>, threads: usize) -> Self {
        Worker {
            id,
            app,
            store,
            threads: threads.max(1),
            timing: WorkerTiming::default(),
            epoch: 0,
            now: 0,
            instances: BTreeMap::new(),
            completed: BTreeSet::new(),
            pending: BTreeMap::new(),
            dependents: BTreeMap::new(),
            ready: BTreeSet::new(),
            running: BTreeMap::new(),
            copy_data: BTreeMap::new(),
            window: ProfileWindow::default(),
            last_account: 0,
            last_heartbeat: 0,
            terminated: false,
        }
    }

    pub fn with_timing(mut self, timing: WorkerTiming) -> Self {
        self.timing = timing;
        self
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn set_id(&mut self, id: WorkerId) {
        self.id = id;
    }

    pub fn store(&self) -> Option<&ShardStore> {
        self.store.as_ref()
    }

    pub fn set_store(&mut self, store: ShardStore) {
        self.store = Some(store);
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Held version of an instance, if resident.
    pub fn held(&self, id: LogicalObjectId) -> Option<u64> {
        self.instances.get(&id).map(|i| i.version)
    }

    pub fn payload(&self, id: LogicalObjectId) -> Option<&[f64]> {
        self.instances.get(&id).map(|i| i.payload.as_slice())
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn register(&self, endpoint: &str) -> Message {
        Message::RegisterWorker { endpoint: endpoint.to_string(), threads: self.threads as u32 }
    }

    pub fn handle(&mut self, now: u64, input: WorkerInput) -> Result<Vec<WorkerOutput>, WorkerError> {
        self.account(now);
        let mut out = Vec::new();
        match input {
            WorkerInput::Message(msg) => self.on_message(msg, &mut out)?,
            WorkerInput::TaskDone { job, epoch, result } => self.on_task_done(job, epoch, result, &mut out)?,
            WorkerInput::Tick => self.on_tick(&mut out),
        }
        self.start_ready(&mut out)?;
        Ok(out)
    }

    /// Splits elapsed time into compute, blocked-on-receive and idle.
    fn account(&mut self, now: u64) {
        let dt = now.saturating_sub(self.last_account);
        self.last_account = now.max(self.last_account);
        self.now = self.last_account;
        if dt == 0 {
            return;
        }
        if !self.running.is_empty() {
            self.window.compute_ns += dt;
            return;
        }
        let peers: BTreeSet<WorkerId> = self
            .pending
            .iter()
            .filter_map(|(id, p)| match p.kind {
                PendingKind::Receive { from, .. } if !self.copy_data.contains_key(id) => Some(from),
                _ => None,
            })
            .collect();
        if !peers.is_empty() {
            self.window.blocked_ns += dt;
            for p in peers {
                *self.window.blocked_on.entry(p).or_default() += dt;
            }
        }
    }

    fn on_tick(&mut self, out: &mut Vec<WorkerOutput>) {
        if self.terminated {
            return;
        }
        if self.now >= self.last_heartbeat + self.timing.heartbeat_ns {
            self.last_heartbeat = self.now;
            out.push(WorkerOutput::Send { to: Node::Controller, msg: Message::Heartbeat });
        }
        if self.now >= self.window.start + self.timing.window_ns {
            let w = std::mem::take(&mut self.window);
            let report = ProfileReport {
                epoch: self.epoch,
                worker: self.id,
                window: w.index,
                window_ns: self.now - w.start,
                compute_ns: w.compute_ns,
                blocked_ns: w.blocked_ns,
                blocked_on: w.blocked_on.into_iter().collect(),
                work_units: w.work_units,
            };
            self.window = ProfileWindow { index: w.index + 1, start: self.now, ..Default::default() };
            out.push(WorkerOutput::Send { to: Node::Controller, msg: Message::ProfileReport(report) });
        }
    }

    /// Drops all job state of an older epoch. Instances stay; the
    /// controller decides which of them count as held.
    fn enter_epoch(&mut self, epoch: u64) {
        if epoch <= self.epoch {
            return;
        }
        log::debug!("worker {} enters epoch {epoch}", self.id);
        self.epoch = epoch;
        self.completed.clear();
        self.pending.clear();
        self.dependents.clear();
        self.ready.clear();
        self.copy_data.clear();
    }

    fn on_message(&mut self, msg: Message, out: &mut Vec<WorkerOutput>) -> Result<(), WorkerError> {
        if let Some(e) = msg.epoch() {
            if e < self.epoch {
                log::debug!("worker {} drops stale {:?} of epoch {e}", self.id, msg.tag());
                return Ok(());
            }
            self.enter_epoch(e);
        }
        match msg {
            Message::CreateData { objects, .. } => {
                for id in objects {
                    let obj = self.app.registry().get(id).map_err(|_| WorkerError::Unexpected("CreateData"))?;
                    let payload = self.app.initial_payload(obj);
                    self.instances.insert(id, Instance { version: 0, payload });
                }
            }
            Message::ExecuteJob(cmd) => {
                let before = cmd.before.clone();
                self.enqueue(cmd.job, PendingKind::Execute(cmd), &before)?;
            }
            Message::CopySend { copy, object, version, to, before, .. } => {
                if to == self.id {
                    return Err(WorkerError::SelfCopy(copy));
                }
                self.enqueue(copy, PendingKind::Send { object, version, to }, &before)?;
            }
            Message::CopyReceive { copy, object, version, from, before, .. } => {
                if from == self.id {
                    return Err(WorkerError::SelfCopy(copy));
                }
                self.enqueue(copy, PendingKind::Receive { object, version, from }, &before)?;
            }
            Message::CopyData { copy, object, version, payload, .. } => {
                self.copy_data.insert(copy, (object, version, payload));
                if self.pending.get(&copy).is_some_and(|p| p.remaining == 0) {
                    self.ready.insert(copy);
                }
            }
            Message::SaveShard { checkpoint, objects, before, .. } => {
                self.enqueue(JobId(u64::MAX - checkpoint), PendingKind::Save { checkpoint, objects }, &before)?;
            }
            Message::RestoreShard { epoch, checkpoint, objects } => {
                out.push(WorkerOutput::Send { to: Node::Controller, msg: self.restore(epoch, checkpoint, &objects) });
            }
            Message::ReassignPartitions { you, workers, .. } => {
                self.id = you;
                out.push(WorkerOutput::Peers(workers));
            }
            Message::Terminate { collect } => {
                let entries = collect
                    .iter()
                    .filter_map(|id| {
                        self.instances
                            .get(id)
                            .map(|i| (Binding { object: *id, version: i.version }, i.payload.clone()))
                    })
                    .collect();
                out.push(WorkerOutput::Send { to: Node::Controller, msg: Message::StateDump { entries } });
                out.push(WorkerOutput::Exit);
                self.terminated = true;
            }
            Message::Heartbeat => {}
            Message::RegisterWorker { .. } => return Err(WorkerError::Unexpected("RegisterWorker")),
            Message::SpawnBatch { .. } => return Err(WorkerError::Unexpected("SpawnBatch")),
            Message::JobDone { .. } => return Err(WorkerError::Unexpected("JobDone")),
            Message::ProfileReport(_) => return Err(WorkerError::Unexpected("ProfileReport")),
            Message::ShardAck { .. } => return Err(WorkerError::Unexpected("ShardAck")),
            Message::StateDump { .. } => return Err(WorkerError::Unexpected("StateDump")),
        }
        Ok(())
    }

    fn restore(&mut self, epoch: u64, checkpoint: u64, objects: &[LogicalObjectId]) -> Message {
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        let mut bytes = 0;
        let loaded = match &self.store {
            Some(s) => s.load(checkpoint).map_err(|e| e.to_string()),
            None => Err("no store".to_string()),
        };
        match loaded {
            Ok(mut contents) => {
                self.instances.clear();
                for id in objects {
                    match contents.remove(id) {
                        Some((version, payload)) => {
                            bytes += 8 * payload.len() as u64;
                            ok.push(Binding { object: *id, version });
                            self.instances.insert(*id, Instance { version, payload });
                        }
                        None => failed.push(*id),
                    }
                }
            }
            Err(e) => {
                log::warn!("worker {} cannot restore checkpoint {checkpoint}: {e}", self.id);
                self.instances.clear();
                failed.extend_from_slice(objects);
            }
        }
        Message::ShardAck { epoch, checkpoint, op: ShardOp::Restore, ok, failed, bytes }
    }

    fn enqueue(&mut self, id: JobId, kind: PendingKind, before: &[JobId]) -> Result<(), WorkerError> {
        if self.pending.contains_key(&id) || self.completed.contains(&id) {
            return Err(WorkerError::DuplicateJob(id));
        }
        let mut remaining = 0;
        for b in before {
            if self.completed.contains(b) {
                continue;
            }
            if !self.pending.contains_key(b) {
                return Err(WorkerError::UnknownPredecessor { job: id, missing: *b });
            }
            self.dependents.entry(*b).or_default().push(id);
            remaining += 1;
        }
        let is_receive = matches!(kind, PendingKind::Receive { .. });
        self.pending.insert(id, Pending { kind, remaining });
        if remaining == 0 && (!is_receive || self.copy_data.contains_key(&id)) {
            self.ready.insert(id);
        }
        Ok(())
    }

    fn complete(&mut self, id: JobId) {
        self.pending.remove(&id);
        self.completed.insert(id);
        for d in self.dependents.remove(&id).unwrap_or_default() {
            if let Some(p) = self.pending.get_mut(&d) {
                p.remaining -= 1;
                let waiting_data = matches!(p.kind, PendingKind::Receive { .. }) && !self.copy_data.contains_key(&d);
                if p.remaining == 0 && !waiting_data {
                    self.ready.insert(d);
                }
            }
        }
    }

    fn check_version(&self, job: JobId, object: LogicalObjectId, expected: u64) -> Result<&Instance, WorkerError> {
        match self.instances.get(&object) {
            Some(i) if i.version == expected => Ok(i),
            other => Err(WorkerError::VersionMismatch { job, object, expected, found: other.map(|i| i.version) }),
        }
    }

    fn start_ready(&mut self, out: &mut Vec<WorkerOutput>) -> Result<(), WorkerError> {
        loop {
            // copies never occupy a thread; take them first
            let next = self
                .ready
                .iter()
                .find(|id| {
                    matches!(self.pending[id].kind, PendingKind::Send { .. } | PendingKind::Receive { .. })
                })
                .copied()
                .or_else(|| (self.running.len() < self.threads).then(|| self.ready.first().copied()).flatten());
            let Some(id) = next else { return Ok(()) };
            self.ready.remove(&id);
            let kind = self.pending[&id].kind.clone();
            match kind {
                PendingKind::Send { object, version, to } => {
                    let payload = self.check_version(id, object, version)?.payload.clone();
                    out.push(WorkerOutput::Send {
                        to: Node::Worker(to),
                        msg: Message::CopyData { epoch: self.epoch, copy: id, object, version, payload },
                    });
                    self.finish_copy(id, DoneKind::CopySend, out);
                }
                PendingKind::Receive { object, version, .. } => {
                    let (obj, v, payload) = self.copy_data.remove(&id).expect("ready receive has data");
                    if obj != object || v != version {
                        return Err(WorkerError::VersionMismatch { job: id, object, expected: version, found: Some(v) });
                    }
                    self.instances.insert(object, Instance { version, payload });
                    self.finish_copy(id, DoneKind::CopyReceive, out);
                }
                PendingKind::Execute(cmd) => {
                    let mut inputs = BTreeMap::new();
                    let mut units = 0u64;
                    for b in &cmd.reads {
                        let inst = self.check_version(cmd.job, b.object, b.version)?;
                        units += inst.payload.len() as u64;
                        inputs.insert(b.object, inst.payload.clone());
                    }
                    let reg = self.app.registry();
                    for b in &cmd.writes {
                        units += reg.get(b.object).map(|o| o.elements() as u64).unwrap_or(0);
                    }
                    let task = ComputeTask {
                        job: cmd.job,
                        epoch: self.epoch,
                        kind: TaskKind::Job {
                            function: cmd.function.clone(),
                            params: cmd.params.clone(),
                            inputs,
                            writes: cmd.writes.iter().map(|b| b.object).collect(),
                            id_block: cmd.id_block,
                        },
                        work_units: units,
                    };
                    self.running.insert(id, units);
                    out.push(WorkerOutput::Start(task));
                }
                PendingKind::Save { checkpoint, objects } => {
                    let mut entries = Vec::with_capacity(objects.len());
                    for b in &objects {
                        let inst = self.check_version(id, b.object, b.version)?;
                        entries.push((*b, inst.payload.clone()));
                    }
                    self.running.insert(id, 0);
                    out.push(WorkerOutput::Start(ComputeTask {
                        job: id,
                        epoch: self.epoch,
                        kind: TaskKind::Save { checkpoint, entries },
                        work_units: 0,
                    }));
                }
            }
        }
    }

    fn finish_copy(&mut self, id: JobId, kind: DoneKind, out: &mut Vec<WorkerOutput>) {
        self.complete(id);
        out.push(WorkerOutput::Send { to: Node::Controller, msg: Message::JobDone { epoch: self.epoch, job: id, kind } });
    }

    fn on_task_done(
        &mut self,
        job: JobId,
        epoch: u64,
        result: TaskResult,
        out: &mut Vec<WorkerOutput>,
    ) -> Result<(), WorkerError> {
        let units = self.running.remove(&job).unwrap_or(0);
        if epoch != self.epoch {
            log::debug!("worker {} discards result of {job:?} from epoch {epoch}", self.id);
            return Ok(());
        }
        let Some(pending) = self.pending.get(&job) else { return Ok(()) };
        match (&pending.kind, result) {
            (PendingKind::Execute(cmd), TaskResult::Wrote(written)) => {
                let versions: BTreeMap<LogicalObjectId, u64> = cmd.writes.iter().map(|b| (b.object, b.version)).collect();
                for (object, payload) in written {
                    let Some(&version) = versions.get(&object) else {
                        return Err(WorkerError::Unexpected("write outside the declared write set"));
                    };
                    self.instances.insert(object, Instance { version, payload });
                }
                self.window.work_units += units;
                self.complete(job);
                out.push(done(epoch, job));
            }
            (PendingKind::Execute(_), TaskResult::Spawned(jobs)) => {
                self.complete(job);
                out.push(WorkerOutput::Send {
                    to: Node::Controller,
                    msg: Message::SpawnBatch { epoch, spawner: job, jobs },
                });
                out.push(done(epoch, job));
            }
            (PendingKind::Save { checkpoint, objects }, result) => {
                let (ok, failed, bytes) = match result {
                    TaskResult::Saved { bytes } => (objects.clone(), Vec::new(), bytes),
                    _ => (Vec::new(), objects.iter().map(|b| b.object).collect(), 0),
                };
                let checkpoint = *checkpoint;
                self.complete(job);
                out.push(WorkerOutput::Send {
                    to: Node::Controller,
                    msg: Message::ShardAck { epoch, checkpoint, op: ShardOp::Save, ok, failed, bytes },
                });
            }
            (_, TaskResult::Failed(reason)) => {
                return Err(WorkerError::JobFailed(job, reason));
            }
            _ => return Err(WorkerError::Unexpected("task result kind")),
        }
        Ok(())
    }
}

fn done(epoch: u64, job: JobId) -> WorkerOutput {
    WorkerOutput::Send { to: Node::Controller, msg: Message::JobDone { epoch, job, kind: DoneKind::Compute } }
}
