//! Single-process reference execution: one flat store, jobs run one at a
//! time in lowest-id ready order.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::app::{AppError, Application, JobContext, JobOutcome};
use crate::data::LogicalObjectId;
use crate::graph::{GraphError, IdBlock, JobGraph, JobId, JobStatus};

/// Ids granted per parent; shared with the controller's default.
pub const ORACLE_BLOCK: u64 = 1024;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("job graph stalled with {0} jobs pending")]
    Stalled(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRun {
    pub state: BTreeMap<LogicalObjectId, Vec<f64>>,
    pub versions: BTreeMap<LogicalObjectId, u64>,
    pub compute_jobs: u64,
    pub parent_jobs: u64,
    /// Loop-head iterations in execution order.
    pub iterations: Vec<u64>,
}

pub fn serial_oracle(app: &dyn Application) -> Result<OracleRun, OracleError> {
    let reg = app.registry();
    let mut state: BTreeMap<LogicalObjectId, Vec<f64>> =
        reg.objects().iter().map(|o| (o.id, app.initial_payload(o))).collect();
    let mut versions: BTreeMap<LogicalObjectId, u64> = reg.objects().iter().map(|o| (o.id, 0)).collect();
    let mut graph = JobGraph::new();
    let mut next_block = ORACLE_BLOCK;
    graph.submit_root(app.main_job(JobId(0)))?;
    let mut run = OracleRun { state: BTreeMap::new(), versions: BTreeMap::new(), compute_jobs: 0, parent_jobs: 0, iterations: vec![] };

    while let Some(id) = graph.ready_jobs().pop_first() {
        let spec = graph.get(id).expect("ready job exists").clone();
        graph.set_status(id, JobStatus::Running)?;
        let inputs: BTreeMap<LogicalObjectId, Vec<f64>> =
            spec.read.iter().map(|o| (*o, state[o].clone())).collect();
        let writes: Vec<LogicalObjectId> = spec.write.iter().copied().collect();
        let block = spec.parent.then(|| {
            let b = IdBlock { start: next_block, len: ORACLE_BLOCK };
            next_block += ORACLE_BLOCK;
            b
        });
        if let Some(b) = block {
            graph.grant_block(id, b);
        }
        if let Some(it) = spec.iteration {
            run.iterations.push(it);
        }
        let ctx = JobContext { job: id, function: &spec.function, params: &spec.params, inputs: &inputs, writes: &writes };
        match app.run(&ctx, block)? {
            JobOutcome::Wrote(out) => {
                run.compute_jobs += 1;
                for (obj, payload) in out {
                    *versions.get_mut(&obj).expect("registered") += 1;
                    state.insert(obj, payload);
                }
            }
            JobOutcome::Spawned(batch) => {
                run.parent_jobs += 1;
                graph.submit_batch(batch, id)?;
            }
        }
        graph.set_status(id, JobStatus::Done)?;
        graph.prune_done();
    }
    if !graph.all_done() {
        return Err(OracleError::Stalled(graph.frontier().len()));
    }
    run.state = state;
    run.versions = versions;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::{Diffusion2d, DiffusionConfig, Water1d};

    #[test]
    fn water_oracle_is_deterministic() {
        let app = Water1d::new(16, 2, 3).unwrap();
        let a = serial_oracle(&app).unwrap();
        let b = serial_oracle(&app).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.compute_jobs, 3 * 4);
        assert_eq!(a.iterations, vec![0, 1, 2, 3]);
    }

    #[test]
    fn water_zero_iterations() {
        let app = Water1d::new(16, 2, 0).unwrap();
        let run = serial_oracle(&app).unwrap();
        assert_eq!(run.compute_jobs, 0);
        // Main and the first ForLoop
        assert_eq!(run.parent_jobs, 2);
    }

    #[test]
    fn diffusion_runs() {
        let app = Diffusion2d::new(DiffusionConfig { iterations: 2, ..Default::default() }).unwrap();
        let run = serial_oracle(&app).unwrap();
        assert!(run.compute_jobs > 0);
        assert!(run.state.values().flatten().all(|v| v.is_finite()));
    }
}
