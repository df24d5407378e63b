//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. `throttle` and
//! `crash` may repeat. Unknown keys are errors so typos do not silently
//! fall back to defaults. See the README for the full key list.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::app::{Application, Diffusion2d, DiffusionConfig, InitialField, Water1d};
use crate::controller::{ControllerConfig, StragglerThresholds};
use crate::transport::sim::{FaultPlan, NetConfig};
use crate::worker::{WorkerTiming, SECOND_NS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppKind {
    Water1d,
    Diffusion2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    Simulated,
    Socket,
}

/// Simulated cost of tasks on the virtual clock.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub task_overhead_ns: u64,
    pub ns_per_unit: f64,
    pub disk_bytes_per_sec: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { task_overhead_ns: 20_000, ns_per_unit: 50_000.0, disk_bytes_per_sec: 200.0e6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub app: AppKind,
    pub transport: TransportKind,
    pub workers: u32,
    pub threads: usize,
    pub seed: Option<u64>,
    pub iterations: u64,
    /// Water: `[cells]`; diffusion: `[x, y]`.
    pub extent: Vec<i64>,
    pub partitions: Vec<u32>,
    pub solver_cap: u64,
    pub solver_tolerance: f64,
    pub dt_c: f64,
    pub dt_eps: f64,
    pub initial: InitialField,
    pub checkpoint_interval_ns: Option<u64>,
    pub straggler: StragglerThresholds,
    pub profile_window_ns: u64,
    pub rebalance: bool,
    pub replicate: bool,
    pub heartbeat_ns: u64,
    pub missed_heartbeats: u64,
    pub net: NetConfig,
    pub cost: CostModel,
    pub faults: FaultPlan,
    pub metrics: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub max_time_ns: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            app: AppKind::Water1d,
            transport: TransportKind::Simulated,
            workers: 2,
            threads: 1,
            seed: Some(1),
            iterations: 3,
            extent: vec![16],
            partitions: vec![2],
            solver_cap: 10,
            solver_tolerance: 1e-6,
            dt_c: 0.2,
            dt_eps: 1e-3,
            initial: InitialField::Wave,
            checkpoint_interval_ns: None,
            straggler: StragglerThresholds::default(),
            profile_window_ns: 2 * SECOND_NS,
            rebalance: true,
            replicate: true,
            heartbeat_ns: SECOND_NS,
            missed_heartbeats: 3,
            net: NetConfig::default(),
            cost: CostModel::default(),
            faults: FaultPlan::none(),
            metrics: None,
            store: None,
            max_time_ns: 3_600 * SECOND_NS,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { line, key: key.into(), reason: e.to_string() })
}

fn seconds(line: usize, key: &str, v: &str) -> Result<u64, ConfigError> {
    let s: f64 = parse(line, key, v)?;
    if !(s >= 0.0) || !s.is_finite() {
        return Err(ConfigError::Value { line, key: key.into(), reason: "must be a non-negative number".into() });
    }
    Ok((s * 1e9).round() as u64)
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(['x', ',']).map(|p| parse(line, key, p.trim())).collect()
}

fn bool_value(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Value { line, key: key.into(), reason: "expected true or false".into() }),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
        text.parse()
    }

    /// Fills defaults that depend on the chosen app.
    fn app_defaults(app: AppKind) -> RunConfig {
        match app {
            AppKind::Water1d => RunConfig::default(),
            AppKind::Diffusion2d => {
                let d = DiffusionConfig::default();
                RunConfig {
                    app,
                    extent: d.extent.to_vec(),
                    partitions: d.partitions.to_vec(),
                    iterations: d.iterations,
                    ..RunConfig::default()
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.transport == TransportKind::Simulated && self.seed.is_none() {
            return Err(ConfigError::Invalid("the simulated transport requires a seed".into()));
        }
        let dims = match self.app {
            AppKind::Water1d => 1,
            AppKind::Diffusion2d => 2,
        };
        if self.extent.len() != dims || self.partitions.len() != dims {
            return Err(ConfigError::Invalid(format!("extent and partitions need {dims} component(s)")));
        }
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be at least 1".into()));
        }
        self.build_app().map(|_| ())
    }

    pub fn build_app(&self) -> Result<Arc<dyn Application>, ConfigError> {
        let invalid = |e: crate::app::AppError| ConfigError::Invalid(e.to_string());
        Ok(match self.app {
            AppKind::Water1d => Arc::new(Water1d::new(self.extent[0], self.partitions[0], self.iterations).map_err(invalid)?),
            AppKind::Diffusion2d => Arc::new(
                Diffusion2d::new(DiffusionConfig {
                    extent: [self.extent[0], self.extent[1]],
                    partitions: [self.partitions[0], self.partitions[1]],
                    iterations: self.iterations,
                    solver_cap: self.solver_cap,
                    tolerance: self.solver_tolerance,
                    dt_c: self.dt_c,
                    dt_eps: self.dt_eps,
                    initial: self.initial,
                })
                .map_err(invalid)?,
            ),
        })
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            workers: self.workers,
            straggler: self.straggler.clone(),
            rebalance: self.rebalance,
            checkpoint_interval_ns: self.checkpoint_interval_ns,
            heartbeat_ns: self.heartbeat_ns,
            missed_heartbeats: self.missed_heartbeats,
            manifest_dir: self.store.as_ref().map(|s| s.join("controller")),
            replicate: self.replicate,
            ..ControllerConfig::default()
        }
    }

    pub fn worker_timing(&self) -> WorkerTiming {
        WorkerTiming { heartbeat_ns: self.heartbeat_ns, window_ns: self.profile_window_ns }
    }

    /// Shard directory of one worker.
    pub fn worker_store(&self, worker: u32) -> Option<PathBuf> {
        self.store.as_ref().map(|s| s.join(format!("worker-{worker}")))
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let app = match pairs.iter().find(|(_, k, _)| k == "app") {
            Some((line, _, v)) => match v.as_str() {
                "water1d" => AppKind::Water1d,
                "diffusion2d" => AppKind::Diffusion2d,
                other => {
                    return Err(ConfigError::Value { line: *line, key: "app".into(), reason: format!("unknown app `{other}`") })
                }
            },
            None => return Err(ConfigError::Invalid("missing required key `app`".into())),
        };
        let mut c = RunConfig { seed: None, ..RunConfig::app_defaults(app) };
        let mut seen = std::collections::BTreeSet::new();
        for (line, key, v) in pairs {
            let (line, k, v) = (line, key.as_str(), v.as_str());
            if k != "throttle" && k != "crash" && !seen.insert(key.clone()) {
                return Err(ConfigError::Duplicate(key));
            }
            match k {
                "app" => {}
                "transport" => {
                    c.transport = match v {
                        "simulated" => TransportKind::Simulated,
                        "socket" => TransportKind::Socket,
                        _ => return Err(ConfigError::Value { line, key, reason: "expected simulated or socket".into() }),
                    }
                }
                "workers" => c.workers = parse(line, k, v)?,
                "threads" => c.threads = parse(line, k, v)?,
                "seed" => c.seed = Some(parse(line, k, v)?),
                "iterations" => c.iterations = parse(line, k, v)?,
                "extent" => c.extent = list(line, k, v)?,
                "partitions" => c.partitions = list(line, k, v)?,
                "solver_cap" => c.solver_cap = parse(line, k, v)?,
                "solver_tolerance" => c.solver_tolerance = parse(line, k, v)?,
                "dt_c" => c.dt_c = parse(line, k, v)?,
                "dt_eps" => c.dt_eps = parse(line, k, v)?,
                "initial" => {
                    c.initial = match v {
                        "wave" => InitialField::Wave,
                        _ => match v.strip_prefix("uniform:") {
                            Some(x) => InitialField::Uniform(parse(line, k, x)?),
                            None => {
                                return Err(ConfigError::Value { line, key, reason: "expected wave or uniform:<value>".into() })
                            }
                        },
                    }
                }
                "checkpoint_interval_s" => {
                    let ns = seconds(line, k, v)?;
                    c.checkpoint_interval_ns = (ns > 0).then_some(ns);
                }
                "straggler_busy" => c.straggler.busy = parse(line, k, v)?,
                "straggler_blocked" => c.straggler.blocked = parse(line, k, v)?,
                "straggler_windows" => c.straggler.windows = parse(line, k, v)?,
                "profile_window_s" => c.profile_window_ns = seconds(line, k, v)?,
                "rebalance" => c.rebalance = bool_value(line, k, v)?,
                "replicate" => c.replicate = bool_value(line, k, v)?,
                "heartbeat_s" => c.heartbeat_ns = seconds(line, k, v)?,
                "missed_heartbeats" => c.missed_heartbeats = parse(line, k, v)?,
                "latency_us" => c.net.latency_ns = (parse::<f64>(line, k, v)? * 1e3) as u64,
                "jitter_us" => c.net.jitter_ns = (parse::<f64>(line, k, v)? * 1e3) as u64,
                "bandwidth_mb_s" => c.net.bytes_per_sec = parse::<f64>(line, k, v)? * 1e6,
                "task_overhead_us" => c.cost.task_overhead_ns = (parse::<f64>(line, k, v)? * 1e3) as u64,
                "cost_ns_per_unit" => c.cost.ns_per_unit = parse(line, k, v)?,
                "disk_mb_s" => c.cost.disk_bytes_per_sec = parse::<f64>(line, k, v)? * 1e6,
                "throttle" => {
                    let parts: Vec<&str> = v.split(':').collect();
                    let [w, at, f] = parts.as_slice() else {
                        return Err(ConfigError::Value { line, key, reason: "expected worker:start_s:factor".into() });
                    };
                    c.faults = std::mem::take(&mut c.faults).throttle(
                        parse(line, k, w)?,
                        seconds(line, k, at)?,
                        parse(line, k, f)?,
                    );
                }
                "crash" => {
                    let Some((w, at)) = v.split_once(':') else {
                        return Err(ConfigError::Value { line, key, reason: "expected worker:time_s".into() });
                    };
                    c.faults = std::mem::take(&mut c.faults).crash(parse(line, k, w)?, seconds(line, k, at)?);
                }
                "metrics" => c.metrics = Some(PathBuf::from(v)),
                "store" => c.store = Some(PathBuf::from(v)),
                "max_time_s" => c.max_time_ns = seconds(line, k, v)?,
                _ => return Err(ConfigError::UnknownKey { line, key }),
            }
        }
        if let Some(seed) = c.seed {
            c.net.seed = seed;
        }
        c.validate()?;
        Ok(c)
    }
}
