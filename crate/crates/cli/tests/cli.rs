//! End-to-end runs of the `gridflow` binary.

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gridflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridflow"))
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn hash_of(summary: &str) -> &str {
    summary.split("hash=").nth(1).expect("summary has a hash").trim()
}

const WATER: &str = "app = water1d\nworkers = 2\nextent = 16\npartitions = 2\niterations = 3\nseed = 1\n";

#[test]
fn run_matches_oracle_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "water.conf", WATER);
    let log = dir.path().join("water.ndjson");
    let run = gridflow().arg("run").arg(&cfg).env("GRIDFLOW_METRICS", &log).output().unwrap();
    assert!(run.status.success(), "{run:?}");
    let summary = stdout(&run);
    assert!(summary.contains("iterations=3") && summary.contains("copies=6"), "{summary}");

    let oracle = gridflow().arg("oracle").arg(&cfg).output().unwrap();
    assert!(oracle.status.success());
    assert_eq!(stdout(&oracle).trim(), hash_of(&summary));

    let fixture = dir.path().join("water.fixture.json");
    assert!(gridflow().arg("oracle").arg(&cfg).arg("--out").arg(&fixture).status().unwrap().success());
    let verify = gridflow().arg("verify").arg(&log).arg(&fixture).output().unwrap();
    assert!(verify.status.success(), "{verify:?}");
    assert_eq!(stdout(&verify).trim(), "ok");

    // a fixture from another run must be rejected
    let other = write(dir.path(), "other.conf", &WATER.replace("iterations = 3", "iterations = 4"));
    let wrong = dir.path().join("wrong.json");
    assert!(gridflow().arg("oracle").arg(&other).arg("--out").arg(&wrong).status().unwrap().success());
    let bad = gridflow().arg("verify").arg(&log).arg(&wrong).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("mismatch"));
}

#[test]
fn summarize_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "water.conf", WATER);
    let log = dir.path().join("m.ndjson");
    assert!(gridflow().arg("run").arg(&cfg).env("GRIDFLOW_METRICS", &log).status().unwrap().success());
    let out = gridflow().arg("summarize").arg(&log).output().unwrap();
    assert!(out.status.success());
    let table = stdout(&out);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("time_s,iteration,event"));
    let iteration_rows = lines.filter(|l| l.ends_with(",iteration")).count();
    assert!(iteration_rows >= 3, "{table}");

    // a truncated log has no summary record
    let text = fs::read_to_string(&log).unwrap();
    let cut: Vec<&str> = text.lines().collect();
    let truncated = write(dir.path(), "cut.ndjson", &(cut[..cut.len() - 1].join("\n") + "\n"));
    assert_eq!(gridflow().arg("summarize").arg(&truncated).status().unwrap().code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [
        ("noapp.conf", "workers = 2\nseed = 1\n"),
        ("unknown.conf", "app = water1d\nseed = 1\nflux = 3\n"),
        ("noseed.conf", "app = water1d\nworkers = 2\n"),
        ("badvalue.conf", "app = water1d\nseed = 1\nworkers = many\n"),
    ] {
        let cfg = write(dir.path(), name, body);
        let out = gridflow().arg("run").arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{name}: {out:?}");
        assert!(!out.stderr.is_empty());
    }
    let missing = gridflow().arg("run").arg(dir.path().join("absent.conf")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn losing_every_worker_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "dead.conf", &WATER.replace("workers = 2", "workers = 1").replace("iterations = 3", "iterations = 50"));
    let mut f = fs::OpenOptions::new().append(true).open(&cfg).unwrap();
    writeln!(f, "crash = 1:0.001").unwrap();
    let out = gridflow().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "{out:?}");
}

#[test]
fn worker_exits_4_when_controller_hangs_up() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "water.conf", WATER);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let child = gridflow().arg("worker").arg("--controller").arg(addr.to_string()).arg("--config").arg(&cfg).spawn().unwrap();
    let (conn, _) = listener.accept().unwrap();
    drop(conn);
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn socket_run_matches_simulated() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write(dir.path(), "sim.conf", WATER);
    let sock = write(dir.path(), "sock.conf", &format!("{WATER}transport = socket\nthreads = 2\n"));
    let a = gridflow().arg("run").arg(&sim).output().unwrap();
    let b = gridflow().arg("run").arg(&sock).output().unwrap();
    assert!(a.status.success() && b.status.success(), "{b:?}");
    assert_eq!(hash_of(&stdout(&a)), hash_of(&stdout(&b)));
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.parse::<gridflow::config::RunConfig>().is_ok(), "{}", path.display());
    }
}
