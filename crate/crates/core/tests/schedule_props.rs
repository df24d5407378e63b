//! Random job graphs run on the simulated cluster: the distributed
//! result must match the serial oracle bit for bit, and no two tasks that
//! overlapped in time on one worker may conflict on an object.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use gridflow::app::{decode_params, encode_params, serial_oracle, AppError, Application, IdMinter, JobContext, JobOutcome};
use gridflow::config::RunConfig;
use gridflow::data::{register_objects, LogicalObject, LogicalObjectId, ObjectRegistry, Variable};
use gridflow::driver::run_simulated_app;
use gridflow::graph::{IdBlock, JobId, JobSpec};
use gridflow::region::DomainSpec;
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Step {
    reads: BTreeSet<usize>,
    writes: BTreeSet<usize>,
    /// Indices of earlier steps of the same round.
    after: BTreeSet<usize>,
}

struct RandomGraph {
    registry: ObjectRegistry,
    rounds: Vec<Vec<Step>>,
    /// Access sets of every spawned compute job, by id.
    spawned: Mutex<BTreeMap<JobId, (BTreeSet<LogicalObjectId>, BTreeSet<LogicalObjectId>)>>,
}

impl RandomGraph {
    fn new(partitions: u32, rounds: Vec<Vec<Step>>) -> Self {
        let domain = DomainSpec::new(&[4 * partitions as i64], &[partitions]).unwrap().with_default_ghost_width(1).unwrap();
        let registry =
            register_objects(&domain, &[Variable::cell("a"), Variable::partition_scalar("s"), Variable::global_scalar("g")])
                .unwrap();
        RandomGraph { registry, rounds, spawned: Mutex::new(BTreeMap::new()) }
    }

    fn object(&self, k: usize) -> LogicalObjectId {
        let objs = self.registry.objects();
        objs[k % objs.len()].id
    }

    fn all(&self) -> Vec<LogicalObjectId> {
        self.registry.objects().iter().map(|o| o.id).collect()
    }

    fn round(&self, r: usize, minter: &mut IdMinter) -> Result<Vec<JobSpec>, AppError> {
        let Some(steps) = self.rounds.get(r) else { return Ok(Vec::new()) };
        let mut ids = Vec::new();
        let mut batch = Vec::new();
        let mut log = self.spawned.lock().unwrap();
        for (i, s) in steps.iter().enumerate() {
            let id = minter.mint()?;
            ids.push(id);
            let reads: BTreeSet<LogicalObjectId> = s.reads.iter().map(|k| self.object(*k)).collect();
            let writes: BTreeSet<LogicalObjectId> = s.writes.iter().map(|k| self.object(*k)).collect();
            log.insert(id, (reads.clone(), writes.clone()));
            batch.push(
                JobSpec::compute(id, "Mix")
                    .with_params(encode_params(&[r as u64, i as u64]))
                    .reads(reads)
                    .writes(writes)
                    .after(s.after.iter().map(|j| ids[*j])),
            );
        }
        batch.push(
            JobSpec::parent(minter.mint()?, "Round")
                .with_params(encode_params(&[r as u64 + 1]))
                .after(ids)
                .accessing(self.all())
                .loop_head(r as u64 + 1),
        );
        Ok(batch)
    }
}

impl Application for RandomGraph {
    fn name(&self) -> &str {
        "random-graph"
    }

    fn registry(&self) -> &ObjectRegistry {
        &self.registry
    }

    fn initial_payload(&self, object: &LogicalObject) -> Vec<f64> {
        (0..object.elements()).map(|k| object.id.0 as f64 + 0.125 * k as f64).collect()
    }

    fn main_job(&self, id: JobId) -> JobSpec {
        JobSpec::parent(id, "Round").with_params(encode_params(&[0])).accessing(self.all()).loop_head(0)
    }

    fn run(&self, ctx: &JobContext<'_>, ids: Option<IdBlock>) -> Result<JobOutcome, AppError> {
        match ctx.function {
            "Round" => {
                let r = decode_params(ctx.function, ctx.params, 1)?[0] as usize;
                Ok(JobOutcome::Spawned(self.round(r, &mut IdMinter::new(ids))?))
            }
            "Mix" => {
                let p = decode_params(ctx.function, ctx.params, 2)?;
                // order-sensitive fold over every input value
                let mut acc = p[0] as f64 * 0.5 + p[1] as f64 * 0.25;
                for v in ctx.inputs.values().flatten() {
                    acc = acc * 0.75 + v.sin();
                }
                let mut out = BTreeMap::new();
                for id in ctx.writes {
                    let n = self.registry.get(*id)?.elements();
                    out.insert(*id, (0..n).map(|k| acc + k as f64 * 1e-3).collect());
                }
                Ok(JobOutcome::Wrote(out))
            }
            other => Err(AppError::UnknownFunction(other.to_string())),
        }
    }
}

fn rounds() -> impl Strategy<Value = Vec<Vec<Step>>> {
    let step = (
        prop::collection::btree_set(0usize..64, 0..4),
        prop::collection::btree_set(0usize..64, 0..3),
        prop::collection::btree_set(0usize..64, 0..3),
    );
    prop::collection::vec(prop::collection::vec(step, 1..14), 1..4).prop_map(|rounds| {
        rounds
            .into_iter()
            .map(|steps| {
                steps
                    .into_iter()
                    .enumerate()
                    .map(|(i, (reads, writes, after))| Step {
                        reads,
                        writes,
                        after: if i == 0 { BTreeSet::new() } else { after.into_iter().map(|a| a % i).collect() },
                    })
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn random_graphs_match_oracle_without_races(
        graph in rounds(),
        partitions in 1u32..=6,
        workers in 1u32..=4,
        threads in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let oracle = serial_oracle(&RandomGraph::new(partitions, graph.clone())).unwrap();
        let app = Arc::new(RandomGraph::new(partitions, graph));
        let cfg = RunConfig { workers, threads, seed: Some(seed), ..RunConfig::default() };
        let report = run_simulated_app(app.clone(), &cfg).unwrap();

        prop_assert_eq!(report.final_state.len(), oracle.state.len());
        for (id, want) in &oracle.state {
            let got = &report.final_state[id];
            let same = got.len() == want.len() && got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same, "object {:?} differs: {:?} vs {:?}", id, got, want);
        }
        prop_assert_eq!(report.summary.compute_jobs, oracle.compute_jobs);

        let access = app.spawned.lock().unwrap();
        let spans: Vec<_> = report.tasks.iter().filter(|t| !t.save && access.contains_key(&JobId(t.job))).collect();
        prop_assert_eq!(spans.len() as u64, oracle.compute_jobs);
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                if a.worker != b.worker || a.end_ns <= b.start_ns || b.end_ns <= a.start_ns {
                    continue;
                }
                let (ra, wa) = &access[&JobId(a.job)];
                let (rb, wb) = &access[&JobId(b.job)];
                let clash = !wa.is_disjoint(wb) || !wa.is_disjoint(rb) || !ra.is_disjoint(wb);
                prop_assert!(!clash, "jobs {} and {} overlapped on worker {} with conflicting access", a.job, b.job, a.worker);
            }
        }
    }
}
