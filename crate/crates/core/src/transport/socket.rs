//! TCP transport: framed messages over `std::net`.
//!
//! Each connection has one reader thread that decodes whole frames and
//! forwards them to the owner's event loop over a channel; only the event
//! loop writes, so frames never interleave. Workers keep one connection to
//! the controller and dial peers lazily for copy payloads.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::message::{decode, encode, Message};
use super::wire::{WireError, MAX_FRAME};
use super::Node;
use crate::app::Application;
use crate::controller::{Controller, ControllerConfig};
use crate::data::{LogicalObjectId, WorkerId};
use crate::driver::{RunError, TICK_NS};
use crate::metrics::{MetricsLog, Summary};
use crate::worker::shard::ShardStore;
use crate::worker::{ComputeTask, TaskResult, Worker, WorkerInput, WorkerOutput, WorkerTiming};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("socket: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n + 4 > MAX_FRAME {
        return Err(WireError::Overlong(n + 4).into());
    }
    let mut frame = vec![0u8; 4 + n];
    frame[..4].copy_from_slice(&len);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(decode(&frame)?))
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

fn spawn_reader<E: Send + 'static>(
    stream: TcpStream,
    tx: Sender<E>,
    wrap: impl Fn(Option<Message>) -> E + Send + 'static,
) -> io::Result<()> {
    thread::Builder::new().name("gridflow-reader".into()).spawn(move || {
        let mut r = BufReader::new(stream);
        loop {
            match read_frame(&mut r) {
                Ok(Some(m)) => {
                    if tx.send(wrap(Some(m))).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("dropping connection: {e}");
                    break;
                }
            }
        }
        let _ = tx.send(wrap(None));
    })?;
    Ok(())
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

enum ControllerEvent {
    Accepted(WorkerId, TcpStream),
    Frame(WorkerId, Message),
    Closed(WorkerId),
}

/// Result of a socket run, as seen by the controller.
#[derive(Debug)]
pub struct ControllerOutcome {
    pub summary: Summary,
    pub final_state: BTreeMap<LogicalObjectId, Vec<f64>>,
}

/// Accepts `cfg.workers` connections on `listener` and runs the controller
/// event loop until the final state is collected. Workers are numbered in
/// accept order starting from 1.
pub fn serve_controller(
    listener: TcpListener,
    app: Arc<dyn Application>,
    cfg: ControllerConfig,
    log: &mut MetricsLog,
    deadline: Duration,
) -> Result<ControllerOutcome, RunError> {
    let (tx, rx) = mpsc::channel();
    let expected = cfg.workers;
    {
        let tx = tx.clone();
        thread::Builder::new().name("gridflow-accept".into()).spawn(move || {
            for (i, stream) in listener.incoming().take(expected as usize).enumerate() {
                let id = i as WorkerId + 1;
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let Ok(reader) = stream.try_clone() else { continue };
                if tx.send(ControllerEvent::Accepted(id, stream)).is_err() {
                    return;
                }
                let wrap = move |m: Option<Message>| match m {
                    Some(m) => ControllerEvent::Frame(id, m),
                    None => ControllerEvent::Closed(id),
                };
                if spawn_reader(reader, tx.clone(), wrap).is_err() {
                    return;
                }
            }
        })?;
    }
    drop(tx);
    let start = Instant::now();
    let mut controller = Controller::new(app, cfg);
    let mut writers: BTreeMap<WorkerId, BufWriter<TcpStream>> = BTreeMap::new();
    let tick = Duration::from_nanos(TICK_NS);
    let mut next_tick = start + tick;
    while !controller.is_finished() {
        if start.elapsed() > deadline {
            return Err(RunError::Stalled(deadline.as_nanos() as u64));
        }
        let wait = next_tick.saturating_duration_since(Instant::now());
        let cmds = match rx.recv_timeout(wait) {
            Ok(ControllerEvent::Accepted(id, stream)) => {
                writers.insert(id, BufWriter::new(stream));
                continue;
            }
            Ok(ControllerEvent::Frame(id, msg)) => controller.handle(elapsed_ns(start), id, msg),
            Ok(ControllerEvent::Closed(id)) => {
                log::info!("connection to worker {id} closed");
                writers.remove(&id);
                continue;
            }
            Err(RecvTimeoutError::Timeout) => {
                next_tick = Instant::now() + tick;
                controller.tick(elapsed_ns(start))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(RunError::ControllerLost("every connection closed before the run finished".into()))
            }
        };
        log.extend(controller.take_records())?;
        for c in cmds? {
            if let Some(w) = writers.get_mut(&c.to) {
                if let Err(e) = write_frame(w, &c.msg) {
                    log::warn!("send to worker {} failed: {e}", c.to);
                    writers.remove(&c.to);
                }
            }
        }
    }
    log.flush()?;
    Ok(ControllerOutcome {
        summary: controller.summary().cloned().expect("finished controller has a summary"),
        final_state: controller.final_state().cloned().unwrap_or_default(),
    })
}

enum WorkerEvent {
    Controller(Option<Message>),
    Peer(Option<Message>),
    Task(JobDone),
}

struct JobDone {
    job: crate::graph::JobId,
    epoch: u64,
    result: TaskResult,
}

pub struct WorkerOptions {
    pub threads: usize,
    pub store: Option<ShardStore>,
    pub timing: WorkerTiming,
}

/// Connects to the controller at `controller`, serves peer copies on
/// `listener`, and runs until told to terminate.
pub fn run_worker(
    controller: impl ToSocketAddrs,
    listener: TcpListener,
    app: Arc<dyn Application>,
    opts: WorkerOptions,
) -> Result<(), RunError> {
    let endpoint = listener.local_addr()?.to_string();
    let (tx, rx) = mpsc::channel::<WorkerEvent>();

    let ctrl = TcpStream::connect(controller)?;
    ctrl.set_nodelay(true)?;
    spawn_reader(ctrl.try_clone()?, tx.clone(), WorkerEvent::Controller)?;
    let mut to_controller = BufWriter::new(ctrl);

    {
        let tx = tx.clone();
        thread::Builder::new().name("gridflow-peers".into()).spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                if spawn_reader(stream, tx.clone(), WorkerEvent::Peer).is_err() {
                    return;
                }
            }
        })?;
    }

    let (task_tx, task_rx) = mpsc::channel::<ComputeTask>();
    let task_rx = Arc::new(Mutex::new(task_rx));
    for i in 0..opts.threads.max(1) {
        let rx: Arc<Mutex<Receiver<ComputeTask>>> = task_rx.clone();
        let tx = tx.clone();
        let app = app.clone();
        let store = opts.store.clone();
        thread::Builder::new().name(format!("gridflow-exec-{i}")).spawn(move || loop {
            let task = match rx.lock().expect("task queue").recv() {
                Ok(t) => t,
                Err(_) => return,
            };
            let result = task.run(app.as_ref(), store.as_ref());
            if tx.send(WorkerEvent::Task(JobDone { job: task.job, epoch: task.epoch, result })).is_err() {
                return;
            }
        })?;
    }
    drop(tx);

    let mut worker = Worker::new(0, app, opts.store, opts.threads).with_timing(opts.timing);
    write_frame(&mut to_controller, &worker.register(&endpoint))?;
    let start = Instant::now();
    let mut peers: BTreeMap<WorkerId, SocketAddr> = BTreeMap::new();
    let mut links: BTreeMap<WorkerId, BufWriter<TcpStream>> = BTreeMap::new();
    let tick = Duration::from_nanos(TICK_NS);
    let mut next_tick = start + tick;
    loop {
        let wait = next_tick.saturating_duration_since(Instant::now());
        let input = match rx.recv_timeout(wait) {
            Ok(WorkerEvent::Controller(Some(m))) | Ok(WorkerEvent::Peer(Some(m))) => WorkerInput::Message(m),
            Ok(WorkerEvent::Peer(None)) => continue,
            Ok(WorkerEvent::Controller(None)) => {
                return Err(RunError::ControllerLost("controller closed the connection".into()));
            }
            Ok(WorkerEvent::Task(d)) => WorkerInput::TaskDone { job: d.job, epoch: d.epoch, result: d.result },
            Err(RecvTimeoutError::Timeout) => {
                next_tick = Instant::now() + tick;
                WorkerInput::Tick
            }
            Err(RecvTimeoutError::Disconnected) => return Err(RunError::ControllerLost("event loop closed".into())),
        };
        let me = worker.id();
        let outs = worker.handle(elapsed_ns(start), input).map_err(|source| RunError::Worker { worker: me, source })?;
        for o in outs {
            match o {
                WorkerOutput::Send { to: Node::Controller, msg } => write_frame(&mut to_controller, &msg)?,
                WorkerOutput::Send { to: Node::Worker(p), msg } => {
                    if !links.contains_key(&p) {
                        let addr = peers.get(&p).ok_or_else(|| io::Error::other(format!("no endpoint for worker {p}")))?;
                        let s = TcpStream::connect(addr)?;
                        s.set_nodelay(true)?;
                        links.insert(p, BufWriter::new(s));
                    }
                    if let Err(e) = write_frame(links.get_mut(&p).expect("link"), &msg) {
                        log::warn!("copy to worker {p} failed: {e}");
                        links.remove(&p);
                    }
                }
                WorkerOutput::Start(task) => {
                    task_tx.send(task).map_err(|_| io::Error::other("executor pool stopped"))?;
                }
                WorkerOutput::Peers(table) => {
                    for e in table {
                        match e.endpoint.parse::<SocketAddr>() {
                            Ok(a) => {
                                if peers.insert(e.id, a) != Some(a) {
                                    links.remove(&e.id);
                                }
                            }
                            Err(_) => log::warn!("worker {} has unusable endpoint {:?}", e.id, e.endpoint),
                        }
                    }
                }
                WorkerOutput::Exit => return Ok(()),
            }
        }
    }
}

/// Runs a controller and `workers` worker event loops in threads of this
/// process, all over loopback TCP.
pub fn run_in_threads(
    app: Arc<dyn Application>,
    cfg: ControllerConfig,
    threads: usize,
    timing: WorkerTiming,
    stores: Vec<Option<ShardStore>>,
    log: &mut MetricsLog,
    deadline: Duration,
) -> Result<ControllerOutcome, RunError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let mut handles = Vec::new();
    for i in 0..cfg.workers as usize {
        let app = app.clone();
        let timing = timing.clone();
        let store = stores.get(i).cloned().flatten();
        handles.push(thread::spawn(move || -> Result<(), RunError> {
            let l = TcpListener::bind("127.0.0.1:0")?;
            run_worker(addr, l, app, WorkerOptions { threads, store, timing })
        }));
    }
    let outcome = serve_controller(listener, app, cfg, log, deadline);
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) if outcome.is_ok() => log::warn!("worker ended with {e}"),
            _ => {}
        }
    }
    outcome
}
