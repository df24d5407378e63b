//! Runs a controller and its workers to completion.
//!
//! The simulated driver executes everything on one thread against a
//! virtual clock: kernels really run, but their duration is charged from
//! the cost model, scaled by the fault plan's throttles. The socket
//! driver lives in [`crate::transport::socket`].

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::app::Application;
use crate::config::{ConfigError, RunConfig};
use crate::controller::{Command, Controller, ControllerError, Stats};
use crate::data::{LogicalObjectId, WorkerId};
use crate::graph::JobId;
use crate::metrics::{MetricsError, MetricsLog, Record, Summary};
use crate::transport::sim::{SimEvent, SimNetwork, TraceEntry};
use crate::transport::{Node, WireError};
use crate::worker::shard::ShardStore;
use crate::worker::{ComputeTask, TaskResult, Worker, WorkerError, WorkerInput, WorkerOutput};

/// Simulated interval between liveness/timer checks on every node.
pub const TICK_NS: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("worker {worker}: {source}")]
    Worker { worker: WorkerId, source: WorkerError },
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("run did not finish within {0} ns of simulated time")]
    Stalled(u64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("controller lost: {0}")]
    ControllerLost(String),
}

impl RunError {
    /// Process exit status: 2 config, 3 invariant, 4 unrecoverable.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Controller(ControllerError::Unrecoverable(_)) | RunError::ControllerLost(_) => 4,
            _ => 3,
        }
    }
}

/// One executed task on the virtual clock.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSpan {
    pub worker: WorkerId,
    pub job: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub work_units: u64,
    pub save: bool,
}

#[derive(Debug)]
pub struct RunReport {
    pub summary: Summary,
    pub final_state: BTreeMap<LogicalObjectId, Vec<f64>>,
    pub records: Vec<Record>,
    pub trace: Vec<TraceEntry>,
    pub tasks: Vec<TaskSpan>,
    pub stats: Stats,
}

#[derive(Debug)]
enum Local {
    Tick(Node),
    TaskDone { worker: WorkerId, job: JobId, epoch: u64, result: TaskResult },
}

/// Worker ids of a run with `n` workers.
pub fn worker_ids(n: u32) -> Vec<WorkerId> {
    (1..=n).collect()
}

struct Sim<'a> {
    cfg: &'a RunConfig,
    app: Arc<dyn Application>,
    net: SimNetwork<Local>,
    controller: Controller,
    workers: BTreeMap<WorkerId, Worker>,
    exited: BTreeSet<WorkerId>,
    log: MetricsLog,
    tasks: Vec<TaskSpan>,
}

/// Runs `cfg` on the simulated transport with its own app.
pub fn run_simulated(cfg: &RunConfig) -> Result<RunReport, RunError> {
    let app = cfg.build_app()?;
    run_simulated_app(app, cfg)
}

/// Runs an arbitrary application on the simulated transport.
pub fn run_simulated_app(app: Arc<dyn Application>, cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let mut net_cfg = cfg.net.clone();
    net_cfg.seed = cfg.seed.unwrap_or(net_cfg.seed);
    let log = match &cfg.metrics {
        Some(p) => MetricsLog::to_file(p)?,
        None => MetricsLog::in_memory(),
    };
    let mut workers = BTreeMap::new();
    for w in worker_ids(cfg.workers) {
        let store = cfg.worker_store(w).map(ShardStore::open).transpose().map_err(|e| io::Error::other(e.to_string()))?;
        workers.insert(w, Worker::new(w, app.clone(), store, cfg.threads).with_timing(cfg.worker_timing()));
    }
    let mut sim = Sim {
        cfg,
        app: app.clone(),
        net: SimNetwork::new(net_cfg, cfg.faults.clone()),
        controller: Controller::new(app, cfg.controller_config()),
        workers,
        exited: BTreeSet::new(),
        log,
        tasks: Vec::new(),
    };
    let result = sim.run();
    sim.log.flush()?;
    result?;
    let Sim { controller, net, log, tasks, .. } = sim;
    let summary = controller.summary().cloned().expect("finished run has a summary");
    Ok(RunReport {
        summary,
        final_state: controller.final_state().cloned().unwrap_or_default(),
        records: log.into_records(),
        trace: net.into_trace(),
        tasks,
        stats: controller.stats().clone(),
    })
}

/// Runs `cfg` over loopback TCP with every worker in a thread of this
/// process. The result carries no network trace or task spans.
pub fn run_socket_threads(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let app = cfg.build_app()?;
    let mut log = match &cfg.metrics {
        Some(p) => MetricsLog::to_file(p)?,
        None => MetricsLog::in_memory(),
    };
    let stores = worker_ids(cfg.workers)
        .into_iter()
        .map(|w| cfg.worker_store(w).map(ShardStore::open).transpose())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io::Error::other(e.to_string()))?;
    let deadline = std::time::Duration::from_nanos(cfg.max_time_ns);
    let outcome = crate::transport::socket::run_in_threads(
        app,
        cfg.controller_config(),
        cfg.threads,
        cfg.worker_timing(),
        stores,
        &mut log,
        deadline,
    )?;
    let s = &outcome.summary;
    let stats = Stats {
        compute_jobs: s.compute_jobs,
        copies: s.copies,
        checkpoints: s.checkpoints,
        rewinds: s.rewinds,
        migrations: s.migrations,
    };
    Ok(RunReport {
        summary: outcome.summary,
        final_state: outcome.final_state,
        records: log.into_records(),
        trace: Vec::new(),
        tasks: Vec::new(),
        stats,
    })
}

impl Sim<'_> {
    fn run(&mut self) -> Result<(), RunError> {
        let ids: Vec<WorkerId> = self.workers.keys().copied().collect();
        for w in &ids {
            let msg = self.workers[w].register(&format!("sim:{w}"));
            self.net.send(Node::Worker(*w), Node::Controller, &msg);
        }
        self.net.schedule(TICK_NS, Local::Tick(Node::Controller));
        for w in &ids {
            self.net.schedule(TICK_NS, Local::Tick(Node::Worker(*w)));
        }
        while let Some((t, ev)) = self.net.step()? {
            if t > self.cfg.max_time_ns {
                return Err(RunError::Stalled(self.cfg.max_time_ns));
            }
            match ev {
                SimEvent::Deliver { from, to: Node::Controller, msg } => {
                    let Node::Worker(w) = from else { continue };
                    let cmds = self.controller.handle(t, w, msg);
                    self.after_controller(cmds)?;
                }
                SimEvent::Deliver { to: Node::Worker(w), msg, .. } => {
                    self.to_worker(t, w, WorkerInput::Message(msg))?;
                }
                SimEvent::Local(Local::Tick(Node::Controller)) => {
                    let cmds = self.controller.tick(t);
                    self.after_controller(cmds)?;
                    self.net.schedule(t + TICK_NS, Local::Tick(Node::Controller));
                }
                SimEvent::Local(Local::Tick(Node::Worker(w))) => {
                    if self.alive(w, t) {
                        self.to_worker(t, w, WorkerInput::Tick)?;
                        self.net.schedule(t + TICK_NS, Local::Tick(Node::Worker(w)));
                    }
                }
                SimEvent::Local(Local::TaskDone { worker, job, epoch, result }) => {
                    self.to_worker(t, worker, WorkerInput::TaskDone { job, epoch, result })?;
                }
            }
            if self.controller.is_finished() {
                return Ok(());
            }
        }
        Err(RunError::Stalled(self.net.now()))
    }

    fn alive(&self, w: WorkerId, t: u64) -> bool {
        !self.exited.contains(&w) && !self.net.faults().is_crashed(Node::Worker(w), t)
    }

    fn after_controller(&mut self, cmds: Result<Vec<Command>, ControllerError>) -> Result<(), RunError> {
        let records = self.controller.take_records();
        self.log.extend(records)?;
        for c in cmds? {
            self.net.send(Node::Controller, Node::Worker(c.to), &c.msg);
        }
        Ok(())
    }

    fn to_worker(&mut self, t: u64, w: WorkerId, input: WorkerInput) -> Result<(), RunError> {
        if !self.alive(w, t) {
            return Ok(());
        }
        let worker = self.workers.get_mut(&w).expect("known worker");
        let outs = worker.handle(t, input).map_err(|source| RunError::Worker { worker: w, source })?;
        for o in outs {
            match o {
                WorkerOutput::Send { to, msg } => {
                    self.net.send(Node::Worker(w), to, &msg);
                }
                WorkerOutput::Start(task) => self.start_task(t, w, task),
                WorkerOutput::Peers(_) => {}
                WorkerOutput::Exit => {
                    self.exited.insert(w);
                }
            }
        }
        Ok(())
    }

    fn start_task(&mut self, t: u64, w: WorkerId, task: ComputeTask) {
        let cost = &self.cfg.cost;
        let worker = &self.workers[&w];
        let result = task.run(self.app.as_ref(), worker.store());
        let busy = if task.is_save() {
            task.save_bytes() as f64 / cost.disk_bytes_per_sec * 1e9
        } else {
            cost.ns_per_unit * task.work_units as f64 * self.net.faults().slowdown(w, t)
        };
        let end = t + cost.task_overhead_ns + busy as u64;
        self.tasks.push(TaskSpan {
            worker: w,
            job: task.job.0,
            start_ns: t,
            end_ns: end,
            work_units: task.work_units,
            save: task.is_save(),
        });
        self.net.schedule(end, Local::TaskDone { worker: w, job: task.job, epoch: task.epoch, result });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::serial_oracle;
    use crate::config::AppKind;

    #[test]
    fn water_matches_oracle() {
        for workers in [1, 2] {
            let cfg = RunConfig { workers, ..RunConfig::default() };
            let report = run_simulated(&cfg).unwrap();
            let oracle = serial_oracle(cfg.build_app().unwrap().as_ref()).unwrap();
            assert_eq!(report.final_state, oracle.state, "{workers} workers");
            assert_eq!(report.summary.iterations, 3);
            println!("{workers}: {:?}", report.summary);
        }
    }

    #[test]
    fn socket_threads_match_oracle() {
        let cfg = RunConfig {
            app: AppKind::Diffusion2d,
            workers: 3,
            threads: 2,
            iterations: 2,
            extent: vec![32, 16],
            partitions: vec![4, 2],
            transport: crate::config::TransportKind::Socket,
            max_time_ns: 60 * crate::worker::SECOND_NS,
            ..RunConfig::default()
        };
        let report = run_socket_threads(&cfg).unwrap();
        let oracle = serial_oracle(cfg.build_app().unwrap().as_ref()).unwrap();
        assert_eq!(report.final_state, oracle.state);
    }

    #[test]
    fn diffusion_matches_oracle() {
        let cfg = RunConfig {
            app: AppKind::Diffusion2d,
            workers: 2,
            extent: vec![64, 32],
            partitions: vec![4, 2],
            ..RunConfig::default()
        };
        let report = run_simulated(&cfg).unwrap();
        let oracle = serial_oracle(cfg.build_app().unwrap().as_ref()).unwrap();
        assert_eq!(report.final_state, oracle.state);
        assert_eq!(report.summary.compute_jobs, oracle.compute_jobs);
        println!("{:?}", report.summary);
    }
}
