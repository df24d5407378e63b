//! The controller: a single event loop that owns the job graph, decides
//! placement, inserts copy jobs, builds runtime before sets, and drives
//! load balancing, checkpoints and rewind.
//!
//! Planning works on a *planned* residency map: when a job is scheduled,
//! its writes are recorded as new versions on its worker immediately, so
//! later jobs can be planned against the state they will observe without
//! waiting for completions. Per (object, worker) the controller remembers
//! the local job that produces the planned version and the local jobs that
//! read it since; a job's runtime before set is exactly the unfinished
//! ones among those it conflicts with, plus the copies emitted for it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::app::Application;
use crate::data::{freshest_sources, state_hash, ElementKind, LogicalObjectId, VersionMap, WorkerId};
use crate::graph::{GraphError, IdBlock, JobGraph, JobId, JobSpec, JobStatus};
use crate::metrics::{Record, Summary};
use crate::transport::{Binding, DoneKind, ExecuteJob, Message, ProfileReport, ShardOp, WorkerEntry};
use crate::worker::SECOND_NS;

pub mod checkpoint;
pub mod policy;

pub use checkpoint::{manifest_objects, read_manifest, write_manifest, CheckpointManifest};
pub use policy::{
    absorb_failed, assign_job, detect_stragglers, initial_assignment, is_contiguous, overlap_scores, rebalance,
    Assignment, Move, PolicyError, ProfileHistory, StragglerThresholds,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    /// A scheduling or protocol invariant broke; the run cannot be trusted.
    #[error("invariant violated: {0}")]
    Invariant(String),
    /// State needed to continue is gone (e.g. no surviving shard replica).
    #[error("unrecoverable: {0}")]
    Unrecoverable(String),
}

impl From<GraphError> for ControllerError {
    fn from(e: GraphError) -> Self {
        ControllerError::Invariant(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub workers: u32,
    pub id_block: u64,
    pub straggler: StragglerThresholds,
    pub rebalance: bool,
    pub checkpoint_interval_ns: Option<u64>,
    pub heartbeat_ns: u64,
    pub missed_heartbeats: u64,
    /// Where manifests go; `None` keeps them in memory only.
    pub manifest_dir: Option<PathBuf>,
    /// Second copy of every shard on the next live worker.
    pub replicate: bool,
    /// Reports kept per worker.
    pub history: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            workers: 1,
            id_block: crate::app::oracle::ORACLE_BLOCK,
            straggler: StragglerThresholds::default(),
            rebalance: true,
            checkpoint_interval_ns: None,
            heartbeat_ns: SECOND_NS,
            missed_heartbeats: 3,
            manifest_dir: None,
            replicate: true,
            history: 8,
        }
    }
}

/// A command for one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub to: WorkerId,
    pub msg: Message,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Half {
    Compute,
    Send,
    Receive,
}

#[derive(Clone, Debug)]
pub struct WorkerRecord {
    pub endpoint: String,
    pub threads: u32,
    pub alive: bool,
    pub last_seen: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub compute_jobs: u64,
    pub copies: u64,
    pub checkpoints: u64,
    pub rewinds: u64,
    pub migrations: u64,
}

#[derive(Clone, Debug)]
struct CheckpointInProgress {
    id: u64,
    iteration: u64,
    started: u64,
    awaiting: BTreeSet<WorkerId>,
    frontier: Vec<JobSpec>,
    objects: BTreeMap<LogicalObjectId, u64>,
    shards: BTreeMap<WorkerId, Vec<LogicalObjectId>>,
    bytes: u64,
}

#[derive(Clone, Debug)]
enum Phase {
    Registering,
    Running,
    Restoring { awaiting: BTreeSet<WorkerId>, manifest: Box<CheckpointManifest>, bytes: u64 },
    Collecting { awaiting: BTreeSet<WorkerId>, state: BTreeMap<LogicalObjectId, Vec<f64>> },
    Finished,
}

pub struct Controller {
    cfg: ControllerConfig,
    app: Arc<dyn Application>,
    now: u64,
    epoch: u64,
    phase: Phase,
    workers: BTreeMap<WorkerId, WorkerRecord>,
    assignment: Assignment,
    history: ProfileHistory,
    graph: JobGraph,
    waiting: BTreeSet<JobId>,
    planned: VersionMap,
    producer: BTreeMap<(LogicalObjectId, WorkerId), (JobId, Half)>,
    readers: BTreeMap<(LogicalObjectId, WorkerId), BTreeSet<(JobId, Half)>>,
    inflight: BTreeMap<(JobId, Half), WorkerId>,
    next_id: u64,
    checkpoint: Option<CheckpointInProgress>,
    manifest: Option<CheckpointManifest>,
    last_checkpoint_ns: u64,
    next_checkpoint: u64,
    max_iteration: u64,
    stats: Stats,
    records: Vec<Record>,
    final_state: Option<BTreeMap<LogicalObjectId, Vec<f64>>>,
    summary: Option<Summary>,
}

impl Controller {
    pub fn new(app: Arc<dyn Application>, cfg: ControllerConfig) -> Self {
        Controller {
            cfg,
            app,
            now: 0,
            epoch: 0,
            phase: Phase::Registering,
            workers: BTreeMap::new(),
            assignment: Assignment::new(),
            history: ProfileHistory::new(),
            graph: JobGraph::new(),
            waiting: BTreeSet::new(),
            planned: VersionMap::new(),
            producer: BTreeMap::new(),
            readers: BTreeMap::new(),
            inflight: BTreeMap::new(),
            next_id: 1,
            checkpoint: None,
            manifest: None,
            last_checkpoint_ns: 0,
            next_checkpoint: 1,
            max_iteration: 0,
            stats: Stats::default(),
            records: Vec::new(),
            final_state: None,
            summary: None,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn manifest(&self) -> Option<&CheckpointManifest> {
        self.manifest.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Finished)
    }

    pub fn summary(&self) -> Option<&Summary> {
        self.summary.as_ref()
    }

    pub fn final_state(&self) -> Option<&BTreeMap<LogicalObjectId, Vec<f64>>> {
        self.final_state.as_ref()
    }

    pub fn planned(&self) -> &VersionMap {
        &self.planned
    }

    pub fn live_workers(&self) -> Vec<WorkerId> {
        self.workers.iter().filter(|(_, r)| r.alive).map(|(w, _)| *w).collect()
    }

    pub fn worker(&self, w: WorkerId) -> Option<&WorkerRecord> {
        self.workers.get(&w)
    }

    /// Decision records since the last call.
    pub fn take_records(&mut self) -> Vec<Record> {
        std::mem::take(&mut self.records)
    }

    fn record(&mut self, r: Record) {
        self.records.push(r);
    }

    fn alloc(&mut self, n: u64) -> u64 {
        let start = self.next_id;
        self.next_id += n;
        start
    }

    pub fn handle(&mut self, now: u64, from: WorkerId, msg: Message) -> Result<Vec<Command>, ControllerError> {
        self.now = now.max(self.now);
        let mut out = Vec::new();
        if let Message::RegisterWorker { endpoint, threads } = &msg {
            self.on_register(from, endpoint.clone(), *threads, &mut out)?;
            return Ok(out);
        }
        match self.workers.get_mut(&from) {
            Some(r) if r.alive => r.last_seen = self.now,
            _ => return Ok(out),
        }
        if msg.epoch().is_some_and(|e| e != self.epoch) {
            log::debug!("controller drops {:?} from epoch {:?}", msg.tag(), msg.epoch());
            return Ok(out);
        }
        match msg {
            Message::Heartbeat => {}
            Message::JobDone { job, kind, .. } => self.on_done(job, kind, &mut out)?,
            Message::SpawnBatch { spawner, jobs, .. } => {
                let ids = self.graph.submit_batch(jobs, spawner)?;
                self.waiting.extend(ids);
            }
            Message::ProfileReport(r) => self.on_profile(from, r, &mut out)?,
            Message::ShardAck { checkpoint, op: ShardOp::Save, failed, bytes, .. } => {
                self.on_save_ack(from, checkpoint, failed, bytes, &mut out)?
            }
            Message::ShardAck { checkpoint, op: ShardOp::Restore, ok, bytes, .. } => {
                self.on_restore_ack(from, checkpoint, ok, bytes, &mut out)?
            }
            Message::StateDump { entries } => self.on_dump(from, entries)?,
            other => {
                return Err(ControllerError::Invariant(format!("worker {from} sent {:?}", other.tag())));
            }
        }
        self.pump(&mut out)?;
        Ok(out)
    }

    /// Liveness and timer checks.
    pub fn tick(&mut self, now: u64) -> Result<Vec<Command>, ControllerError> {
        self.now = now.max(self.now);
        let mut out = Vec::new();
        if matches!(self.phase, Phase::Registering | Phase::Finished) {
            return Ok(out);
        }
        let limit = self.cfg.heartbeat_ns * self.cfg.missed_heartbeats;
        let dead: Vec<WorkerId> = self
            .workers
            .iter()
            .filter(|(_, r)| r.alive && self.now > r.last_seen + limit)
            .map(|(w, _)| *w)
            .collect();
        for w in dead {
            self.on_failure(w, &mut out)?;
        }
        self.pump(&mut out)?;
        Ok(out)
    }

    fn directory(&self) -> Vec<WorkerEntry> {
        self.live_workers()
            .into_iter()
            .map(|w| WorkerEntry {
                id: w,
                endpoint: self.workers[&w].endpoint.clone(),
                partitions: self.assignment.get(&w).map(|p| p.iter().copied().collect()).unwrap_or_default(),
            })
            .collect()
    }

    fn broadcast_assignment(&self, out: &mut Vec<Command>) {
        let table = self.directory();
        for w in self.live_workers() {
            out.push(Command {
                to: w,
                msg: Message::ReassignPartitions { epoch: self.epoch, you: w, workers: table.clone() },
            });
        }
    }

    fn on_register(
        &mut self,
        from: WorkerId,
        endpoint: String,
        threads: u32,
        out: &mut Vec<Command>,
    ) -> Result<(), ControllerError> {
        if !matches!(self.phase, Phase::Registering) {
            log::warn!("late registration from worker {from} ignored");
            return Ok(());
        }
        self.workers.insert(from, WorkerRecord { endpoint, threads, alive: true, last_seen: self.now });
        if self.workers.len() as u32 == self.cfg.workers {
            let ids = self.live_workers();
            let reg = self.app.registry();
            self.assignment = initial_assignment(reg.domain().partition_count(), &ids);
            self.record(Record::RunStart {
                time_ns: self.now,
                app: self.app.name().to_string(),
                workers: self.cfg.workers,
                partitions: reg.domain().partition_count(),
                objects: reg.len(),
            });
            self.broadcast_assignment(out);
            self.start_from_scratch(out)?;
        }
        Ok(())
    }

    /// Creates every worker's instances at version 0 and submits `main`.
    fn start_from_scratch(&mut self, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        let app = self.app.clone();
        let reg = app.registry();
        for w in self.live_workers() {
            let parts: Vec<u32> = self.assignment.get(&w).map(|p| p.iter().copied().collect()).unwrap_or_default();
            let objects = reg.creation_set(&parts);
            for o in &objects {
                self.planned.create(*o, w);
            }
            out.push(Command { to: w, msg: Message::CreateData { epoch: self.epoch, objects } });
        }
        let main = JobId(self.alloc(1));
        self.graph = JobGraph::new();
        self.graph.submit_root(app.main_job(main))?;
        self.waiting = BTreeSet::from([main]);
        self.phase = Phase::Running;
        self.pump(out)
    }

    fn is_inflight(&self, entry: &(JobId, Half)) -> bool {
        self.inflight.contains_key(entry)
    }

    fn plannable(&self, spec: &JobSpec) -> bool {
        let need = if spec.parent { JobStatus::Done } else { JobStatus::Scheduled };
        spec.before.iter().all(|b| self.graph.status(*b).is_none_or(|s| s >= need))
    }

    fn checkpoint_due(&self) -> bool {
        self.cfg.checkpoint_interval_ns.is_some_and(|i| self.now >= self.last_checkpoint_ns + i)
    }

    fn quiescent(&self) -> bool {
        self.inflight.is_empty()
            && self
                .graph
                .jobs()
                .all(|(j, s)| s == JobStatus::Done || (j.parent && self.waiting.contains(&j.id)))
    }

    fn pump(&mut self, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        if !matches!(self.phase, Phase::Running) {
            return Ok(());
        }
        loop {
            let mut progressed = false;
            let candidates: Vec<JobId> = self.waiting.iter().copied().collect();
            for id in candidates {
                let spec = self.graph.get(id).expect("waiting job in graph");
                if !self.plannable(spec) {
                    continue;
                }
                if spec.iteration.is_some() && (self.checkpoint.is_some() || self.checkpoint_due()) {
                    if self.checkpoint.is_none() && self.quiescent() {
                        self.start_checkpoint(out)?;
                    }
                    continue;
                }
                self.plan(id, out)?;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        if self.checkpoint.is_none() && self.waiting.is_empty() && self.inflight.is_empty() && self.graph.all_done() {
            self.begin_collect(out)?;
        }
        Ok(())
    }

    /// Makes `target` hold the planned latest version of `obj`, emitting a
    /// copy job when it does not. Returns the copy id.
    fn ensure_resident(
        &mut self,
        obj: LogicalObjectId,
        target: WorkerId,
        reason: &str,
        out: &mut Vec<Command>,
    ) -> Result<Option<JobId>, ControllerError> {
        let needed = self
            .planned
            .latest(obj)
            .ok_or_else(|| ControllerError::Invariant(format!("{obj:?} has no planned version")))?;
        if self.planned.held(obj, target) == Some(needed) {
            return Ok(None);
        }
        let sources = freshest_sources(obj, needed, &self.planned).map_err(|e| ControllerError::Invariant(e.to_string()))?;
        let src = sources
            .into_iter()
            .find(|w| self.workers.get(w).is_some_and(|r| r.alive))
            .ok_or_else(|| ControllerError::Invariant(format!("no live worker holds {obj:?} v{needed}")))?;
        let copy = JobId(self.alloc(1));
        let send_before: Vec<JobId> = self
            .producer
            .get(&(obj, src))
            .filter(|p| self.is_inflight(p))
            .map(|p| p.0)
            .into_iter()
            .collect();
        let recv_before = self.conflicts_at(obj, target);
        self.readers.entry((obj, src)).or_default().insert((copy, Half::Send));
        self.producer.insert((obj, target), (copy, Half::Receive));
        self.readers.remove(&(obj, target));
        self.planned.record_copy(obj, target, needed);
        self.inflight.insert((copy, Half::Send), src);
        self.inflight.insert((copy, Half::Receive), target);
        self.stats.copies += 1;
        self.record(Record::CopyInserted {
            time_ns: self.now,
            copy: copy.0,
            object: obj.0,
            version: needed,
            from: src,
            to: target,
            reason: reason.to_string(),
        });
        out.push(Command {
            to: src,
            msg: Message::CopySend { epoch: self.epoch, copy, object: obj, version: needed, to: target, before: send_before },
        });
        out.push(Command {
            to: target,
            msg: Message::CopyReceive {
                epoch: self.epoch,
                copy,
                object: obj,
                version: needed,
                from: src,
                before: recv_before.into_iter().collect(),
            },
        });
        Ok(Some(copy))
    }

    /// Unfinished local jobs a new writer of `obj` at `w` must wait for.
    fn conflicts_at(&mut self, obj: LogicalObjectId, w: WorkerId) -> BTreeSet<JobId> {
        let mut out = BTreeSet::new();
        if let Some(p) = self.producer.get(&(obj, w)).filter(|p| self.inflight.contains_key(p)) {
            out.insert(p.0);
        }
        if let Some(rs) = self.readers.get_mut(&(obj, w)) {
            rs.retain(|r| self.inflight.contains_key(r));
            out.extend(rs.iter().map(|r| r.0));
        }
        out
    }

    fn plan(&mut self, id: JobId, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        let spec = self.graph.get(id).expect("planned job exists").clone();
        let app = self.app.clone();
        let reg = app.registry();
        let target = assign_job(&spec, reg, &self.assignment).map_err(|e| ControllerError::Unrecoverable(e.to_string()))?;
        let overlap: Vec<(WorkerId, u64)> =
            overlap_scores(&spec, reg, &self.assignment).into_iter().filter(|(_, s)| *s > 0).collect();

        let mut before = BTreeSet::new();
        for obj in &spec.read {
            if let Some(copy) = self.ensure_resident(*obj, target, &format!("read by {}", id.0), out)? {
                before.insert(copy);
            }
            if let Some(p) = self.producer.get(&(*obj, target)).filter(|p| self.is_inflight(p)) {
                before.insert(p.0);
            }
        }
        for obj in &spec.write {
            before.extend(self.conflicts_at(*obj, target));
        }
        for b in &spec.before {
            if self.inflight.get(&(*b, Half::Compute)) == Some(&target) {
                before.insert(*b);
            }
        }
        before.remove(&id);

        let reads: Vec<Binding> = spec
            .read
            .iter()
            .map(|o| Binding { object: *o, version: self.planned.latest(*o).expect("resident") })
            .collect();
        for obj in &spec.read {
            self.readers.entry((*obj, target)).or_default().insert((id, Half::Compute));
        }
        let mut writes = Vec::with_capacity(spec.write.len());
        for obj in &spec.write {
            if self.planned.latest(*obj).is_none() {
                return Err(ControllerError::Invariant(format!("{obj:?} written before creation")));
            }
            let version = self.planned.record_write(*obj, target);
            self.producer.insert((*obj, target), (id, Half::Compute));
            self.readers.remove(&(*obj, target));
            writes.push(Binding { object: *obj, version });
        }
        let id_block = spec.parent.then(|| IdBlock { start: self.alloc(self.cfg.id_block), len: self.cfg.id_block });
        if let Some(b) = id_block {
            self.graph.grant_block(id, b);
        }
        self.graph.set_status(id, JobStatus::Scheduled)?;
        self.waiting.remove(&id);
        self.inflight.insert((id, Half::Compute), target);
        if let Some(it) = spec.iteration {
            self.max_iteration = self.max_iteration.max(it);
            self.record(Record::IterationStart { time_ns: self.now, iteration: it, epoch: self.epoch });
            self.graph.prune_done();
        }
        self.record(Record::Assignment {
            time_ns: self.now,
            job: id.0,
            function: spec.function.clone(),
            worker: target,
            overlap,
        });
        out.push(Command {
            to: target,
            msg: Message::ExecuteJob(ExecuteJob {
                epoch: self.epoch,
                job: id,
                function: spec.function,
                params: spec.params,
                before: before.into_iter().collect(),
                reads,
                writes,
                id_block,
            }),
        });
        Ok(())
    }

    fn on_done(&mut self, job: JobId, kind: DoneKind, _out: &mut Vec<Command>) -> Result<(), ControllerError> {
        let half = match kind {
            DoneKind::Compute => Half::Compute,
            DoneKind::CopySend => Half::Send,
            DoneKind::CopyReceive => Half::Receive,
        };
        if self.inflight.remove(&(job, half)).is_none() {
            return Err(ControllerError::Invariant(format!("completion of unknown job {job:?} ({kind:?})")));
        }
        if half == Half::Compute {
            let parent = self.graph.get(job).map(|j| j.parent).unwrap_or(false);
            self.graph.set_status(job, JobStatus::Done)?;
            if !parent {
                self.stats.compute_jobs += 1;
            }
        }
        Ok(())
    }

    fn on_profile(&mut self, from: WorkerId, r: ProfileReport, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        let window_ns = r.window_ns.max(1) as f64;
        self.record(Record::Profile {
            time_ns: self.now,
            worker: from,
            window: r.window,
            compute_ratio: r.compute_ns as f64 / window_ns,
            blocked_ratio: r.blocked_ns as f64 / window_ns,
        });
        let h = self.history.entry(from).or_default();
        h.push(r);
        if h.len() > self.cfg.history {
            h.remove(0);
        }
        if !matches!(self.phase, Phase::Running) {
            return Ok(());
        }
        let flagged = detect_stragglers(&self.history, &self.cfg.straggler);
        let Some(&straggler) = flagged.iter().find(|w| self.assignment.get(w).is_some_and(|p| !p.is_empty())) else {
            return Ok(());
        };
        self.record(Record::StragglerDetected { time_ns: self.now, worker: straggler });
        if self.cfg.rebalance {
            let k = self.cfg.straggler.windows;
            let speeds: BTreeMap<WorkerId, f64> = self
                .history
                .iter()
                .filter_map(|(w, rs)| policy::measured_speed(&rs[rs.len().saturating_sub(k)..]).map(|s| (*w, s)))
                .collect();
            match rebalance(self.app.registry().domain(), &self.assignment, straggler, &speeds) {
                Ok((next, moves)) if !moves.is_empty() => self.apply_migration(straggler, next, moves, out)?,
                Ok(_) => self.record(Record::MigrationSkipped {
                    time_ns: self.now,
                    straggler,
                    reason: "no move lowers the predicted makespan".into(),
                }),
                Err(e) => {
                    log::warn!("rebalance skipped: {e}");
                    self.record(Record::MigrationSkipped { time_ns: self.now, straggler, reason: e.to_string() });
                }
            }
        }
        self.history.clear();
        Ok(())
    }

    fn apply_migration(
        &mut self,
        straggler: WorkerId,
        next: Assignment,
        moves: Vec<Move>,
        out: &mut Vec<Command>,
    ) -> Result<(), ControllerError> {
        self.assignment = next;
        let app = self.app.clone();
        let mut copies = 0;
        for m in &moves {
            for obj in app.registry().owned_by_partition(m.partition) {
                if self.ensure_resident(obj, m.to, "migration", out)?.is_some() {
                    copies += 1;
                }
            }
        }
        self.stats.migrations += 1;
        self.record(Record::Migration {
            time_ns: self.now,
            straggler,
            moves: moves.iter().map(|m| (m.partition, m.from, m.to)).collect(),
            copies,
        });
        self.broadcast_assignment(out);
        Ok(())
    }

    fn owner_of_partition(&self, lin: u32) -> Option<WorkerId> {
        self.assignment.iter().find(|(_, p)| p.contains(&lin)).map(|(w, _)| *w)
    }

    fn start_checkpoint(&mut self, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        let frontier: Vec<JobSpec> = self.graph.frontier().into_iter().cloned().collect();
        let iteration = frontier.iter().filter_map(|j| j.iteration).min().unwrap_or(self.max_iteration);
        let objects = manifest_objects(&frontier);
        let live = self.live_workers();
        let app = self.app.clone();
        let reg = app.registry();
        let mut table = BTreeMap::new();
        let mut shards: BTreeMap<WorkerId, Vec<LogicalObjectId>> = BTreeMap::new();
        for obj in objects {
            let version = self
                .planned
                .latest(obj)
                .ok_or_else(|| ControllerError::Invariant(format!("{obj:?} in snapshot but never created")))?;
            table.insert(obj, version);
            let o = reg.get(obj).map_err(|e| ControllerError::Invariant(e.to_string()))?;
            let primary = match (o.kind, o.owner) {
                (ElementKind::GlobalScalar, _) | (_, None) => None,
                (_, Some(lin)) => self.owner_of_partition(lin),
            }
            .or_else(|| {
                self.planned.holders(obj).find(|(w, v)| *v == version && live.contains(w)).map(|(w, _)| w)
            })
            .ok_or_else(|| ControllerError::Invariant(format!("{obj:?} has no live holder")))?;
            let mut targets = vec![primary];
            if self.cfg.replicate && live.len() > 1 {
                let pos = live.iter().position(|w| *w == primary).unwrap_or(0);
                targets.push(live[(pos + 1) % live.len()]);
            }
            for w in targets {
                self.ensure_resident(obj, w, "checkpoint replica", out)?;
                shards.entry(w).or_default().push(obj);
            }
        }
        let id = self.next_checkpoint;
        self.next_checkpoint += 1;
        let mut awaiting = BTreeSet::new();
        for (w, objs) in &shards {
            let mut before = BTreeSet::new();
            for o in objs {
                if let Some(p) = self.producer.get(&(*o, *w)).filter(|p| self.is_inflight(p)) {
                    before.insert(p.0);
                }
            }
            let bindings = objs.iter().map(|o| Binding { object: *o, version: table[o] }).collect();
            out.push(Command {
                to: *w,
                msg: Message::SaveShard {
                    epoch: self.epoch,
                    checkpoint: id,
                    objects: bindings,
                    before: before.into_iter().collect(),
                },
            });
            awaiting.insert(*w);
        }
        self.checkpoint = Some(CheckpointInProgress {
            id,
            iteration,
            started: self.now,
            awaiting,
            frontier,
            objects: table,
            shards,
            bytes: 0,
        });
        if self.checkpoint.as_ref().is_some_and(|c| c.awaiting.is_empty()) {
            self.commit_checkpoint()?;
        }
        Ok(())
    }

    fn on_save_ack(
        &mut self,
        from: WorkerId,
        checkpoint: u64,
        failed: Vec<LogicalObjectId>,
        bytes: u64,
        _out: &mut Vec<Command>,
    ) -> Result<(), ControllerError> {
        let Some(c) = self.checkpoint.as_mut().filter(|c| c.id == checkpoint) else { return Ok(()) };
        if !failed.is_empty() {
            self.abort_checkpoint(format!("worker {from} failed to persist {} objects", failed.len()));
            return Ok(());
        }
        c.awaiting.remove(&from);
        c.bytes += bytes;
        if c.awaiting.is_empty() {
            self.commit_checkpoint()?;
        }
        Ok(())
    }

    fn abort_checkpoint(&mut self, reason: String) {
        if let Some(c) = self.checkpoint.take() {
            log::warn!("checkpoint {} aborted: {reason}", c.id);
            self.last_checkpoint_ns = self.now;
            self.record(Record::CheckpointAborted { time_ns: self.now, checkpoint: c.id, reason });
        }
    }

    fn commit_checkpoint(&mut self) -> Result<(), ControllerError> {
        let c = self.checkpoint.take().expect("checkpoint in progress");
        let manifest = CheckpointManifest {
            checkpoint: c.id,
            iteration: c.iteration,
            epoch: self.epoch,
            frontier: c.frontier,
            objects: c.objects,
            shards: c.shards,
        };
        if let Some(dir) = &self.cfg.manifest_dir {
            if let Err(e) = write_manifest(dir, &manifest) {
                self.checkpoint = None;
                self.last_checkpoint_ns = self.now;
                self.record(Record::CheckpointAborted {
                    time_ns: self.now,
                    checkpoint: c.id,
                    reason: format!("manifest write failed: {e}"),
                });
                return Ok(());
            }
        }
        self.manifest = Some(manifest);
        self.stats.checkpoints += 1;
        self.last_checkpoint_ns = self.now;
        self.record(Record::CheckpointCommitted {
            time_ns: self.now,
            checkpoint: c.id,
            iteration: c.iteration,
            duration_ns: self.now - c.started,
            bytes: c.bytes,
        });
        Ok(())
    }

    fn on_failure(&mut self, dead: WorkerId, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        log::warn!("worker {dead} missed its heartbeats; declaring it dead");
        if let Some(r) = self.workers.get_mut(&dead) {
            r.alive = false;
        }
        self.history.remove(&dead);
        self.record(Record::WorkerDead { time_ns: self.now, worker: dead });
        if matches!(self.phase, Phase::Finished) {
            return Ok(());
        }
        if self.live_workers().is_empty() {
            return Err(ControllerError::Unrecoverable("every worker has failed".into()));
        }
        self.abort_checkpoint(format!("worker {dead} died"));
        self.assignment = absorb_failed(self.app.registry().domain(), &self.assignment, dead)
            .map_err(|e| ControllerError::Unrecoverable(e.to_string()))?;
        self.rewind(out)
    }

    /// Discards all in-flight state and resumes from the last manifest,
    /// or from the initial state when no checkpoint exists yet.
    fn rewind(&mut self, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        self.epoch += 1;
        self.stats.rewinds += 1;
        self.inflight.clear();
        self.producer.clear();
        self.readers.clear();
        self.planned = VersionMap::new();
        self.waiting.clear();
        self.broadcast_assignment(out);
        match self.manifest.clone() {
            Some(m) => {
                self.graph.replace_with(m.frontier.clone());
                self.waiting = m.frontier.iter().map(|j| j.id).collect();
                let live: BTreeSet<WorkerId> = self.live_workers().into_iter().collect();
                for w in &live {
                    out.push(Command {
                        to: *w,
                        msg: Message::RestoreShard {
                            epoch: self.epoch,
                            checkpoint: m.checkpoint,
                            objects: m.objects.keys().copied().collect(),
                        },
                    });
                }
                self.phase = Phase::Restoring { awaiting: live, manifest: Box::new(m), bytes: 0 };
                Ok(())
            }
            None => {
                self.record(Record::Rewind {
                    time_ns: self.now,
                    checkpoint: None,
                    iteration: 0,
                    epoch: self.epoch,
                    restored_bytes: 0,
                });
                self.start_from_scratch(out)
            }
        }
    }

    fn on_restore_ack(
        &mut self,
        from: WorkerId,
        checkpoint: u64,
        ok: Vec<Binding>,
        bytes: u64,
        _out: &mut Vec<Command>,
    ) -> Result<(), ControllerError> {
        let Phase::Restoring { awaiting, manifest, bytes: total } = &mut self.phase else { return Ok(()) };
        if manifest.checkpoint != checkpoint || !awaiting.remove(&from) {
            return Ok(());
        }
        *total += bytes;
        for b in ok {
            if manifest.objects.get(&b.object) == Some(&b.version) {
                self.planned.restore(b.object, b.version, &[from]);
            }
        }
        if !awaiting.is_empty() {
            return Ok(());
        }
        let manifest = manifest.clone();
        let restored_bytes = *total;
        for (obj, v) in &manifest.objects {
            if self.planned.holders(*obj).all(|(_, held)| held != *v) {
                return Err(ControllerError::Unrecoverable(format!(
                    "no surviving shard holds {obj:?} v{v} of checkpoint {checkpoint}"
                )));
            }
        }
        self.record(Record::Rewind {
            time_ns: self.now,
            checkpoint: Some(checkpoint),
            iteration: manifest.iteration,
            epoch: self.epoch,
            restored_bytes,
        });
        self.last_checkpoint_ns = self.now;
        self.phase = Phase::Running;
        Ok(())
    }

    fn begin_collect(&mut self, out: &mut Vec<Command>) -> Result<(), ControllerError> {
        let mut per_worker: BTreeMap<WorkerId, Vec<LogicalObjectId>> =
            self.live_workers().into_iter().map(|w| (w, Vec::new())).collect();
        for o in self.app.registry().objects() {
            let Some(v) = self.planned.latest(o.id) else { continue };
            let w = self
                .planned
                .holders(o.id)
                .find(|(w, held)| *held == v && per_worker.contains_key(w))
                .map(|(w, _)| w)
                .ok_or_else(|| ControllerError::Invariant(format!("no live holder of {:?} at the end", o.id)))?;
            per_worker.get_mut(&w).unwrap().push(o.id);
        }
        let awaiting = per_worker.keys().copied().collect();
        for (w, collect) in per_worker {
            out.push(Command { to: w, msg: Message::Terminate { collect } });
        }
        self.phase = Phase::Collecting { awaiting, state: BTreeMap::new() };
        Ok(())
    }

    fn on_dump(&mut self, from: WorkerId, entries: Vec<(Binding, Vec<f64>)>) -> Result<(), ControllerError> {
        let Phase::Collecting { awaiting, state } = &mut self.phase else { return Ok(()) };
        if !awaiting.remove(&from) {
            return Ok(());
        }
        for (b, payload) in entries {
            if self.planned.latest(b.object) != Some(b.version) {
                return Err(ControllerError::Invariant(format!(
                    "worker {from} returned {:?} v{} but v{:?} was planned",
                    b.object,
                    b.version,
                    self.planned.latest(b.object)
                )));
            }
            state.insert(b.object, payload);
        }
        if awaiting.is_empty() {
            let state = std::mem::take(state);
            let summary = Summary {
                time_ns: self.now,
                iterations: self.max_iteration,
                compute_jobs: self.stats.compute_jobs,
                copies: self.stats.copies,
                checkpoints: self.stats.checkpoints,
                rewinds: self.stats.rewinds,
                migrations: self.stats.migrations,
                final_hash: state_hash(&state),
            };
            self.record(Record::Summary(summary.clone()));
            self.summary = Some(summary);
            self.final_state = Some(state);
            self.phase = Phase::Finished;
        }
        Ok(())
    }
}
