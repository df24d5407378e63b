//! `gridflow` command line: run experiments, inspect their logs, and start
//! controller or worker processes by hand.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};
use std::time::Duration;

use clap::{Parser, Subcommand};
use gridflow::app::serial_oracle;
use gridflow::config::{ConfigError, RunConfig, TransportKind};
use gridflow::data::state_hash;
use gridflow::driver::{run_simulated, worker_ids, RunError};
use gridflow::metrics::{read_log, summarize, verify, MetricsLog, OracleFixture, Summary};
use gridflow::transport::socket::{run_worker, serve_controller, WorkerOptions};
use gridflow::worker::shard::ShardStore;

/// Paths given here win over the config file.
const METRICS_ENV: &str = "GRIDFLOW_METRICS";
const STORE_ENV: &str = "GRIDFLOW_STORE";

#[derive(Parser)]
#[command(name = "gridflow", version, about = "Controller/worker runtime for partitioned grid simulations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a config to completion and print its summary.
    Run { config: PathBuf },
    /// Tabulate a metrics log as CSV (time_s,iteration,event).
    Summarize { log: PathBuf },
    /// Compare a metrics log against an oracle fixture.
    Verify { log: PathBuf, fixture: PathBuf },
    /// Run the serial oracle for a config and write its fixture.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve as the controller for socket workers.
    Controller {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override the config's checkpoint interval, in seconds (0 disables).
        #[arg(long)]
        checkpoint_interval: Option<f64>,
        #[arg(long)]
        straggler_busy: Option<f64>,
        #[arg(long)]
        straggler_blocked: Option<f64>,
    },
    /// Serve as a worker.
    Worker {
        #[arg(long)]
        controller: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Debug)]
enum Failure {
    Run(RunError),
    Usage(String),
    Internal(String),
    Mismatch(Vec<String>),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure::Run(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Run(RunError::Config(e))
    }
}

impl From<gridflow::metrics::MetricsError> for Failure {
    fn from(e: gridflow::metrics::MetricsError) -> Self {
        Failure::Run(RunError::Metrics(e))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(RunError::Io(e))
    }
}

fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(m) = std::env::var_os(METRICS_ENV) {
        cfg.metrics = Some(PathBuf::from(m));
    }
    if let Some(s) = std::env::var_os(STORE_ENV) {
        cfg.store = Some(PathBuf::from(s));
    }
    Ok(cfg)
}

fn print_summary(s: &Summary) {
    println!(
        "iterations={} compute_jobs={} copies={} checkpoints={} rewinds={} migrations={} time_s={:.3} hash={}",
        s.iterations,
        s.compute_jobs,
        s.copies,
        s.checkpoints,
        s.rewinds,
        s.migrations,
        s.time_ns as f64 * 1e-9,
        s.final_hash
    );
}

/// Controller in this process, workers as child processes.
fn run_socket(cfg: &RunConfig, config_path: &Path) -> Result<Summary, Failure> {
    let app = cfg.build_app()?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let exe = std::env::current_exe()?;
    let mut children: Vec<Child> = Vec::new();
    for w in worker_ids(cfg.workers) {
        let mut cmd = Command::new(&exe);
        cmd.arg("worker")
            .arg("--controller")
            .arg(addr.to_string())
            .arg("--config")
            .arg(config_path)
            .arg("--threads")
            .arg(cfg.threads.to_string());
        if let Some(store) = cfg.worker_store(w) {
            cmd.arg("--store").arg(store);
        }
        children.push(cmd.spawn()?);
    }
    let mut log = match &cfg.metrics {
        Some(p) => MetricsLog::to_file(p)?,
        None => MetricsLog::in_memory(),
    };
    let deadline = Duration::from_nanos(cfg.max_time_ns);
    let outcome = serve_controller(listener, app, cfg.controller_config(), &mut log, deadline);
    for mut c in children {
        if outcome.is_err() {
            let _ = c.kill();
        }
        let _ = c.wait();
    }
    Ok(outcome?.summary)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::Run { config } => {
            let cfg = load_config(&config)?;
            let summary = match cfg.transport {
                TransportKind::Simulated => run_simulated(&cfg)?.summary,
                TransportKind::Socket => run_socket(&cfg, &config)?,
            };
            print_summary(&summary);
        }
        Cmd::Summarize { log } => {
            print!("{}", summarize(&read_log(&log)?)?);
        }
        Cmd::Verify { log, fixture } => {
            let diffs = verify(&read_log(&log)?, &OracleFixture::read(&fixture)?)?;
            if !diffs.is_empty() {
                return Err(Failure::Mismatch(diffs));
            }
            println!("ok");
        }
        Cmd::Oracle { config, out } => {
            let cfg = load_config(&config)?;
            let app = cfg.build_app()?;
            let run = serial_oracle(app.as_ref()).map_err(|e| Failure::Internal(e.to_string()))?;
            let fixture = OracleFixture {
                app: app.name().to_string(),
                iterations: run.iterations.iter().copied().max().unwrap_or(0),
                compute_jobs: run.compute_jobs,
                final_hash: state_hash(&run.state),
            };
            match out {
                Some(p) => fixture.write(&p)?,
                None => println!("{}", fixture.final_hash),
            }
        }
        Cmd::Controller { config, listen, metrics, checkpoint_interval, straggler_busy, straggler_blocked } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = checkpoint_interval {
                cfg.checkpoint_interval_ns = (s > 0.0).then(|| (s * 1e9) as u64);
            }
            if let Some(b) = straggler_busy {
                cfg.straggler.busy = b;
            }
            if let Some(b) = straggler_blocked {
                cfg.straggler.blocked = b;
            }
            let metrics = metrics.or(cfg.metrics.clone());
            let mut log = match &metrics {
                Some(p) => MetricsLog::to_file(p)?,
                None => MetricsLog::in_memory(),
            };
            let listener = TcpListener::bind(&listen)?;
            println!("listening on {}", listener.local_addr()?);
            let deadline = Duration::from_nanos(cfg.max_time_ns);
            let outcome = serve_controller(listener, cfg.build_app()?, cfg.controller_config(), &mut log, deadline)?;
            print_summary(&outcome.summary);
        }
        Cmd::Worker { controller, config, listen, store, threads } => {
            let cfg = load_config(&config)?;
            let store = store.map(ShardStore::open).transpose().map_err(|e| Failure::Usage(e.to_string()))?;
            let listener = TcpListener::bind(&listen)?;
            let opts = WorkerOptions { threads: threads.unwrap_or(cfg.threads), store, timing: cfg.worker_timing() };
            run_worker(controller.as_str(), listener, cfg.build_app()?, opts)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(e)) => {
            eprintln!("gridflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("gridflow: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("gridflow: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Mismatch(diffs)) => {
            for d in diffs {
                eprintln!("mismatch: {d}");
            }
            ExitCode::from(3)
        }
    }
}
