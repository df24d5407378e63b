//! Controller/worker message set and its frame encoding.
//!
//! Frame layout: `u32` little-endian length of everything after it, `u16`
//! little-endian tag, then the body. See `docs/protocol.md` for worked
//! examples.

use std::collections::BTreeSet;
use std::fmt;

use crate::data::{LogicalObjectId, WorkerId};
use crate::graph::{IdBlock, JobId, JobSpec};
use crate::transport::wire::{decimal_ids, Reader, WireError, Writer, MAX_FRAME};

/// `(object, version)` pair naming one instance state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Binding {
    pub object: LogicalObjectId,
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DoneKind {
    Compute,
    CopySend,
    CopyReceive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardOp {
    Save,
    Restore,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerEntry {
    pub id: WorkerId,
    pub endpoint: String,
    pub partitions: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecuteJob {
    pub epoch: u64,
    pub job: JobId,
    pub function: String,
    pub params: Vec<u8>,
    /// Runtime before set: local compute and copy ids.
    pub before: Vec<JobId>,
    /// Versions the job must observe.
    pub reads: Vec<Binding>,
    /// Versions the job produces.
    pub writes: Vec<Binding>,
    /// Ids a parent may mint for its spawn batch.
    pub id_block: Option<IdBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProfileReport {
    pub epoch: u64,
    pub worker: WorkerId,
    pub window: u64,
    pub window_ns: u64,
    pub compute_ns: u64,
    /// Time with no running job and at least one pending receive.
    pub blocked_ns: u64,
    /// Blocked time attributed to each peer with an outstanding receive.
    pub blocked_on: Vec<(WorkerId, u64)>,
    pub work_units: u64,
}

impl ProfileReport {
    pub fn idle_ns(&self) -> u64 {
        self.window_ns.saturating_sub(self.compute_ns + self.blocked_ns)
    }

    pub fn compute_ratio(&self) -> f64 {
        if self.window_ns == 0 {
            0.0
        } else {
            self.compute_ns as f64 / self.window_ns as f64
        }
    }

    pub fn blocked_ratio_on(&self, peer: WorkerId) -> f64 {
        if self.window_ns == 0 {
            return 0.0;
        }
        let b = self.blocked_on.iter().find(|(p, _)| *p == peer).map(|(_, t)| *t).unwrap_or(0);
        b as f64 / self.window_ns as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    RegisterWorker { endpoint: String, threads: u32 },
    SpawnBatch { epoch: u64, spawner: JobId, jobs: Vec<JobSpec> },
    ExecuteJob(ExecuteJob),
    CreateData { epoch: u64, objects: Vec<LogicalObjectId> },
    CopySend { epoch: u64, copy: JobId, object: LogicalObjectId, version: u64, to: WorkerId, before: Vec<JobId> },
    CopyReceive { epoch: u64, copy: JobId, object: LogicalObjectId, version: u64, from: WorkerId, before: Vec<JobId> },
    JobDone { epoch: u64, job: JobId, kind: DoneKind },
    ProfileReport(ProfileReport),
    Heartbeat,
    SaveShard { epoch: u64, checkpoint: u64, objects: Vec<Binding>, before: Vec<JobId> },
    RestoreShard { epoch: u64, checkpoint: u64, objects: Vec<LogicalObjectId> },
    ReassignPartitions { epoch: u64, you: WorkerId, workers: Vec<WorkerEntry> },
    Terminate { collect: Vec<LogicalObjectId> },
    /// Worker-to-worker payload of a copy job.
    CopyData { epoch: u64, copy: JobId, object: LogicalObjectId, version: u64, payload: Vec<f64> },
    /// Reply to SaveShard/RestoreShard.
    ShardAck { epoch: u64, checkpoint: u64, op: ShardOp, ok: Vec<Binding>, failed: Vec<LogicalObjectId>, bytes: u64 },
    /// Reply to Terminate.
    StateDump { entries: Vec<(Binding, Vec<f64>)> },
}

#[repr(u16)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    RegisterWorker = 1,
    SpawnBatch = 2,
    ExecuteJob = 3,
    CreateData = 4,
    CopySend = 5,
    CopyReceive = 6,
    JobDone = 7,
    ProfileReport = 8,
    Heartbeat = 9,
    SaveShard = 10,
    RestoreShard = 11,
    ReassignPartitions = 12,
    Terminate = 13,
    CopyData = 14,
    ShardAck = 15,
    StateDump = 16,
}

impl Tag {
    pub fn from_u16(v: u16) -> Result<Tag, WireError> {
        use Tag::*;
        Ok(match v {
            1 => RegisterWorker,
            2 => SpawnBatch,
            3 => ExecuteJob,
            4 => CreateData,
            5 => CopySend,
            6 => CopyReceive,
            7 => JobDone,
            8 => ProfileReport,
            9 => Heartbeat,
            10 => SaveShard,
            11 => RestoreShard,
            12 => ReassignPartitions,
            13 => Terminate,
            14 => CopyData,
            15 => ShardAck,
            16 => StateDump,
            other => return Err(WireError::UnknownTag(other)),
        })
    }
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::RegisterWorker { .. } => Tag::RegisterWorker,
            Message::SpawnBatch { .. } => Tag::SpawnBatch,
            Message::ExecuteJob(_) => Tag::ExecuteJob,
            Message::CreateData { .. } => Tag::CreateData,
            Message::CopySend { .. } => Tag::CopySend,
            Message::CopyReceive { .. } => Tag::CopyReceive,
            Message::JobDone { .. } => Tag::JobDone,
            Message::ProfileReport(_) => Tag::ProfileReport,
            Message::Heartbeat => Tag::Heartbeat,
            Message::SaveShard { .. } => Tag::SaveShard,
            Message::RestoreShard { .. } => Tag::RestoreShard,
            Message::ReassignPartitions { .. } => Tag::ReassignPartitions,
            Message::Terminate { .. } => Tag::Terminate,
            Message::CopyData { .. } => Tag::CopyData,
            Message::ShardAck { .. } => Tag::ShardAck,
            Message::StateDump { .. } => Tag::StateDump,
        }
    }

    /// Epoch stamp, when the message carries one.
    pub fn epoch(&self) -> Option<u64> {
        match self {
            Message::SpawnBatch { epoch, .. }
            | Message::CreateData { epoch, .. }
            | Message::CopySend { epoch, .. }
            | Message::CopyReceive { epoch, .. }
            | Message::JobDone { epoch, .. }
            | Message::SaveShard { epoch, .. }
            | Message::RestoreShard { epoch, .. }
            | Message::ReassignPartitions { epoch, .. }
            | Message::CopyData { epoch, .. }
            | Message::ShardAck { epoch, .. } => Some(*epoch),
            Message::ExecuteJob(e) => Some(e.epoch),
            Message::ProfileReport(p) => Some(p.epoch),
            _ => None,
        }
    }
}

fn put_jobs(w: &mut Writer, ids: &[JobId]) {
    let mut v: Vec<u64> = ids.iter().map(|j| j.0).collect();
    v.sort_unstable();
    v.dedup();
    w.id_set(v);
}

fn put_objs(w: &mut Writer, ids: &[LogicalObjectId]) {
    let mut v: Vec<u64> = ids.iter().map(|j| j.0).collect();
    v.sort_unstable();
    v.dedup();
    w.id_set(v);
}

fn get_jobs(r: &mut Reader) -> Result<Vec<JobId>, WireError> {
    Ok(r.id_set()?.into_iter().map(JobId).collect())
}

fn get_objs(r: &mut Reader) -> Result<Vec<LogicalObjectId>, WireError> {
    Ok(r.id_set()?.into_iter().map(LogicalObjectId).collect())
}

/// Bindings are sorted by object; ids go as a set, versions as a list.
fn put_bindings(w: &mut Writer, b: &[Binding]) {
    let mut b = b.to_vec();
    b.sort();
    b.dedup_by_key(|x| x.object);
    w.id_set(b.iter().map(|x| x.object.0));
    for x in &b {
        w.varint(x.version);
    }
}

fn get_bindings(r: &mut Reader) -> Result<Vec<Binding>, WireError> {
    let ids = r.id_set()?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        out.push(Binding { object: LogicalObjectId(id), version: r.varint()? });
    }
    Ok(out)
}

fn put_set(w: &mut Writer, s: &BTreeSet<LogicalObjectId>) {
    w.id_set(s.iter().map(|x| x.0));
}

fn get_set(r: &mut Reader) -> Result<BTreeSet<LogicalObjectId>, WireError> {
    Ok(r.id_set()?.into_iter().map(LogicalObjectId).collect())
}

pub fn put_job_spec(w: &mut Writer, j: &JobSpec) {
    w.varint(j.id.0);
    w.str(&j.function);
    w.bytes(&j.params);
    put_set(w, &j.read);
    put_set(w, &j.write);
    w.id_set(j.before.iter().map(|x| x.0));
    w.u8(j.parent as u8);
    put_set(w, &j.access);
    match j.iteration {
        Some(i) => {
            w.u8(1);
            w.varint(i);
        }
        None => w.u8(0),
    }
}

pub fn get_job_spec(r: &mut Reader) -> Result<JobSpec, WireError> {
    Ok(JobSpec {
        id: JobId(r.varint()?),
        function: r.str()?,
        params: r.bytes()?,
        read: get_set(r)?,
        write: get_set(r)?,
        before: r.id_set()?.into_iter().map(JobId).collect(),
        parent: r.bool()?,
        access: get_set(r)?,
        iteration: if r.bool()? { Some(r.varint()?) } else { None },
    })
}

fn encode_body(msg: &Message, w: &mut Writer) {
    match msg {
        Message::RegisterWorker { endpoint, threads } => {
            w.str(endpoint);
            w.varint(*threads as u64);
        }
        Message::SpawnBatch { epoch, spawner, jobs } => {
            w.varint(*epoch);
            w.varint(spawner.0);
            w.varint(jobs.len() as u64);
            for j in jobs {
                put_job_spec(w, j);
            }
        }
        Message::ExecuteJob(e) => {
            w.varint(e.epoch);
            w.varint(e.job.0);
            w.str(&e.function);
            w.bytes(&e.params);
            put_jobs(w, &e.before);
            put_bindings(w, &e.reads);
            put_bindings(w, &e.writes);
            match e.id_block {
                Some(b) => {
                    w.u8(1);
                    w.varint(b.start);
                    w.varint(b.len);
                }
                None => w.u8(0),
            }
        }
        Message::CreateData { epoch, objects } => {
            w.varint(*epoch);
            put_objs(w, objects);
        }
        Message::CopySend { epoch, copy, object, version, to, before } => {
            w.varint(*epoch);
            w.varint(copy.0);
            w.varint(object.0);
            w.varint(*version);
            w.varint(*to as u64);
            put_jobs(w, before);
        }
        Message::CopyReceive { epoch, copy, object, version, from, before } => {
            w.varint(*epoch);
            w.varint(copy.0);
            w.varint(object.0);
            w.varint(*version);
            w.varint(*from as u64);
            put_jobs(w, before);
        }
        Message::JobDone { epoch, job, kind } => {
            w.varint(*epoch);
            w.varint(job.0);
            w.u8(match kind {
                DoneKind::Compute => 0,
                DoneKind::CopySend => 1,
                DoneKind::CopyReceive => 2,
            });
        }
        Message::ProfileReport(p) => {
            w.varint(p.epoch);
            w.varint(p.worker as u64);
            w.varint(p.window);
            w.varint(p.window_ns);
            w.varint(p.compute_ns);
            w.varint(p.blocked_ns);
            w.varint(p.blocked_on.len() as u64);
            for (peer, t) in &p.blocked_on {
                w.varint(*peer as u64);
                w.varint(*t);
            }
            w.varint(p.work_units);
        }
        Message::Heartbeat => {}
        Message::SaveShard { epoch, checkpoint, objects, before } => {
            w.varint(*epoch);
            w.varint(*checkpoint);
            put_bindings(w, objects);
            put_jobs(w, before);
        }
        Message::RestoreShard { epoch, checkpoint, objects } => {
            w.varint(*epoch);
            w.varint(*checkpoint);
            put_objs(w, objects);
        }
        Message::ReassignPartitions { epoch, you, workers } => {
            w.varint(*epoch);
            w.varint(*you as u64);
            w.varint(workers.len() as u64);
            for e in workers {
                w.varint(e.id as u64);
                w.str(&e.endpoint);
                let mut p: Vec<u64> = e.partitions.iter().map(|x| *x as u64).collect();
                p.sort_unstable();
                p.dedup();
                w.id_set(p);
            }
        }
        Message::Terminate { collect } => put_objs(w, collect),
        Message::CopyData { epoch, copy, object, version, payload } => {
            w.varint(*epoch);
            w.varint(copy.0);
            w.varint(object.0);
            w.varint(*version);
            w.f64s(payload);
        }
        Message::ShardAck { epoch, checkpoint, op, ok, failed, bytes } => {
            w.varint(*epoch);
            w.varint(*checkpoint);
            w.u8(match op {
                ShardOp::Save => 0,
                ShardOp::Restore => 1,
            });
            put_bindings(w, ok);
            put_objs(w, failed);
            w.varint(*bytes);
        }
        Message::StateDump { entries } => {
            w.varint(entries.len() as u64);
            for (b, payload) in entries {
                w.varint(b.object.0);
                w.varint(b.version);
                w.f64s(payload);
            }
        }
    }
}

fn decode_body(tag: Tag, r: &mut Reader) -> Result<Message, WireError> {
    let msg = match tag {
        Tag::RegisterWorker => Message::RegisterWorker { endpoint: r.str()?, threads: r.u32()? },
        Tag::SpawnBatch => {
            let epoch = r.varint()?;
            let spawner = JobId(r.varint()?);
            // every spec takes at least 8 bytes
            let n = r.len(8)?;
            let mut jobs = Vec::with_capacity(n);
            for _ in 0..n {
                jobs.push(get_job_spec(r)?);
            }
            Message::SpawnBatch { epoch, spawner, jobs }
        }
        Tag::ExecuteJob => {
            let epoch = r.varint()?;
            let job = JobId(r.varint()?);
            let function = r.str()?;
            let params = r.bytes()?;
            let before = get_jobs(r)?;
            let reads = get_bindings(r)?;
            let writes = get_bindings(r)?;
            let id_block = if r.bool()? { Some(IdBlock { start: r.varint()?, len: r.varint()? }) } else { None };
            Message::ExecuteJob(ExecuteJob { epoch, job, function, params, before, reads, writes, id_block })
        }
        Tag::CreateData => Message::CreateData { epoch: r.varint()?, objects: get_objs(r)? },
        Tag::CopySend => Message::CopySend {
            epoch: r.varint()?,
            copy: JobId(r.varint()?),
            object: LogicalObjectId(r.varint()?),
            version: r.varint()?,
            to: r.u32()?,
            before: get_jobs(r)?,
        },
        Tag::CopyReceive => Message::CopyReceive {
            epoch: r.varint()?,
            copy: JobId(r.varint()?),
            object: LogicalObjectId(r.varint()?),
            version: r.varint()?,
            from: r.u32()?,
            before: get_jobs(r)?,
        },
        Tag::JobDone => {
            let epoch = r.varint()?;
            let job = JobId(r.varint()?);
            let kind = match r.u8()? {
                0 => DoneKind::Compute,
                1 => DoneKind::CopySend,
                2 => DoneKind::CopyReceive,
                v => return Err(WireError::InvalidField { field: "done kind", value: v as u64 }),
            };
            Message::JobDone { epoch, job, kind }
        }
        Tag::ProfileReport => {
            let epoch = r.varint()?;
            let worker = r.u32()?;
            let window = r.varint()?;
            let window_ns = r.varint()?;
            let compute_ns = r.varint()?;
            let blocked_ns = r.varint()?;
            let n = r.len(2)?;
            let mut blocked_on = Vec::with_capacity(n);
            for _ in 0..n {
                blocked_on.push((r.u32()?, r.varint()?));
            }
            let work_units = r.varint()?;
            Message::ProfileReport(ProfileReport {
                epoch,
                worker,
                window,
                window_ns,
                compute_ns,
                blocked_ns,
                blocked_on,
                work_units,
            })
        }
        Tag::Heartbeat => Message::Heartbeat,
        Tag::SaveShard => Message::SaveShard {
            epoch: r.varint()?,
            checkpoint: r.varint()?,
            objects: get_bindings(r)?,
            before: get_jobs(r)?,
        },
        Tag::RestoreShard => {
            Message::RestoreShard { epoch: r.varint()?, checkpoint: r.varint()?, objects: get_objs(r)? }
        }
        Tag::ReassignPartitions => {
            let epoch = r.varint()?;
            let you = r.u32()?;
            let n = r.len(3)?;
            let mut workers = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u32()?;
                let endpoint = r.str()?;
                let partitions = r
                    .id_set()?
                    .into_iter()
                    .map(|p| u32::try_from(p).map_err(|_| WireError::InvalidField { field: "partition", value: p }))
                    .collect::<Result<_, _>>()?;
                workers.push(WorkerEntry { id, endpoint, partitions });
            }
            Message::ReassignPartitions { epoch, you, workers }
        }
        Tag::Terminate => Message::Terminate { collect: get_objs(r)? },
        Tag::CopyData => Message::CopyData {
            epoch: r.varint()?,
            copy: JobId(r.varint()?),
            object: LogicalObjectId(r.varint()?),
            version: r.varint()?,
            payload: r.f64s()?,
        },
        Tag::ShardAck => {
            let epoch = r.varint()?;
            let checkpoint = r.varint()?;
            let op = match r.u8()? {
                0 => ShardOp::Save,
                1 => ShardOp::Restore,
                v => return Err(WireError::InvalidField { field: "shard op", value: v as u64 }),
            };
            Message::ShardAck { epoch, checkpoint, op, ok: get_bindings(r)?, failed: get_objs(r)?, bytes: r.varint()? }
        }
        Tag::StateDump => {
            let n = r.len(3)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let b = Binding { object: LogicalObjectId(r.varint()?), version: r.varint()? };
                entries.push((b, r.f64s()?));
            }
            Message::StateDump { entries }
        }
    };
    Ok(msg)
}

/// Frame: 4-byte LE length, 2-byte LE tag, body.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut body = Writer::new();
    encode_body(msg, &mut body);
    let body = body.into_inner();
    let len = 2 + body.len();
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&(msg.tag() as u16).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes exactly one frame; rejects truncated or overlong input.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    if frame.len() < 6 {
        return Err(WireError::Truncated { needed: 6, had: frame.len() });
    }
    let declared = u32::from_le_bytes(frame[0..4].try_into().unwrap()) as usize;
    if declared + 4 > MAX_FRAME {
        return Err(WireError::Overlong(declared + 4));
    }
    if declared < 2 || declared != frame.len() - 4 {
        return Err(WireError::LengthMismatch { declared, actual: frame.len() - 4 });
    }
    let tag = Tag::from_u16(u16::from_le_bytes(frame[4..6].try_into().unwrap()))?;
    let mut r = Reader::new(&frame[6..]);
    let msg = decode_body(tag, &mut r)?;
    r.finish()?;
    Ok(msg)
}

/// Length of the frame at the start of `buf`, if the header is complete.
pub fn peek_frame_len(buf: &[u8]) -> Result<Option<usize>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let declared = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if declared + 4 > MAX_FRAME {
        return Err(WireError::Overlong(declared + 4));
    }
    Ok(Some(declared + 4))
}

fn ids(v: &[JobId]) -> String {
    decimal_ids(v.iter().map(|j| j.0))
}

fn objs(v: &[LogicalObjectId]) -> String {
    decimal_ids(v.iter().map(|j| j.0))
}

fn bindings(v: &[Binding]) -> String {
    v.iter().map(|b| format!("{}@{}", b.object.0, b.version)).collect::<Vec<_>>().join(",")
}

/// Decimal-ASCII rendering with every identifier spelled out.
impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::ExecuteJob(e) => write!(
                f,
                "ExecuteJob epoch={} job={} function={} params={} before={} reads={} writes={}",
                e.epoch,
                e.job.0,
                e.function,
                e.params.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
                ids(&e.before),
                bindings(&e.reads),
                bindings(&e.writes)
            ),
            Message::CreateData { epoch, objects } => write!(f, "CreateData epoch={epoch} objects={}", objs(objects)),
            Message::CopySend { epoch, copy, object, version, to, before } => write!(
                f,
                "CopySend epoch={epoch} copy={} object={} version={version} to={to} before={}",
                copy.0,
                object.0,
                ids(before)
            ),
            Message::CopyReceive { epoch, copy, object, version, from, before } => write!(
                f,
                "CopyReceive epoch={epoch} copy={} object={} version={version} from={from} before={}",
                copy.0,
                object.0,
                ids(before)
            ),
            Message::JobDone { epoch, job, kind } => write!(f, "JobDone epoch={epoch} job={} kind={kind:?}", job.0),
            other => write!(f, "{:?}", other),
        }
    }
}
