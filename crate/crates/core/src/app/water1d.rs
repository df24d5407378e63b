//! One-dimensional two-substep "water" loop over a single velocity field.
//!
//! Each iteration runs `AdvanceVelocity` on every partition (diffusive
//! smoothing of all owned cells) followed by `AdvanceWater` (a nonlinear
//! self-advection of each partition's central strip). Both read the
//! partition's ghost cells, so after `AdvanceVelocity` rewrote the send
//! strips the controller must exchange them before `AdvanceWater`.

use std::collections::BTreeMap;

use crate::app::{
    central_object, decode_params, encode_params, AppError, Application, IdMinter, JobContext, JobOutcome,
};
use crate::data::{register_objects, LogicalObject, LogicalObjectId, ObjectRegistry, Variable};
use crate::graph::{IdBlock, JobId, JobSpec};
use crate::region::{DomainSpec, Region};
use crate::worker::translator::{default_fill, TranslatorView};

pub const VELOCITY: &str = "velocity";

const SMOOTHING: f64 = 0.25;
const ADVECTION: f64 = 0.1;

#[derive(Debug)]
pub struct Water1d {
    registry: ObjectRegistry,
    iterations: u64,
}

impl Water1d {
    pub fn new(extent: i64, partitions: u32, iterations: u64) -> Result<Self, AppError> {
        let domain = DomainSpec::new(&[extent], &[partitions])?.with_ghost_width(VELOCITY, 1)?;
        let registry = register_objects(&domain, &[Variable::cell(VELOCITY)])?;
        Ok(Water1d { registry, iterations })
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn all_objects(&self) -> Vec<LogicalObjectId> {
        self.registry.objects().iter().map(|o| o.id).collect()
    }

    fn for_loop(&self, it: u64, ids: &mut IdMinter) -> Result<Vec<JobSpec>, AppError> {
        if it >= self.iterations {
            return Ok(Vec::new());
        }
        let parts = self.registry.domain().partition_count();
        let mut batch = Vec::new();
        let mut velocity_jobs = Vec::new();
        for p in 0..parts {
            let id = ids.mint()?;
            velocity_jobs.push(id);
            batch.push(
                JobSpec::compute(id, "AdvanceVelocity")
                    .with_params(encode_params(&[it, p as u64]))
                    .reads(self.registry.touched(VELOCITY, p)?.iter().copied())
                    .writes(self.registry.owned(VELOCITY, p)?.iter().copied()),
            );
        }
        let mut water_jobs = Vec::new();
        for p in 0..parts {
            let id = ids.mint()?;
            water_jobs.push(id);
            batch.push(
                JobSpec::compute(id, "AdvanceWater")
                    .with_params(encode_params(&[it, p as u64]))
                    .reads(self.registry.touched(VELOCITY, p)?.iter().copied())
                    .writes([central_object(&self.registry, VELOCITY, p)?])
                    .after(velocity_jobs.iter().copied()),
            );
        }
        batch.push(
            JobSpec::parent(ids.mint()?, "ForLoop")
                .with_params(encode_params(&[it + 1]))
                .after(water_jobs)
                .accessing(self.all_objects())
                .loop_head(it + 1),
        );
        Ok(batch)
    }

    fn kernel(&self, ctx: &JobContext<'_>, p: u32) -> Result<BTreeMap<LogicalObjectId, Vec<f64>>, AppError> {
        let read: Vec<LogicalObjectId> = self.registry.touched(VELOCITY, p)?.to_vec();
        let view = TranslatorView::gather(&self.registry, &read, ctx.inputs, default_fill())?;
        let domain = self.registry.domain().bounds();
        let mut out = view.clone();
        let targets: Vec<Region> =
            ctx.writes.iter().map(|id| self.registry.get(*id).map(|o| o.region)).collect::<Result<_, _>>()?;
        for region in &targets {
            for cell in region.cells() {
                let v = view.get(cell);
                let left = neighbour(&view, &domain, cell, -1);
                let right = neighbour(&view, &domain, cell, 1);
                let new = match ctx.function {
                    "AdvanceVelocity" => v + SMOOTHING * (left - 2.0 * v + right),
                    _ => v - ADVECTION * v * (right - left) * 0.5,
                };
                out.set(cell, new);
            }
        }
        Ok(out.scatter(&self.registry, ctx.writes)?)
    }
}

/// Value of the cell `d` steps along the axis, mirrored at domain edges.
fn neighbour(view: &TranslatorView, domain: &Region, cell: [i64; 3], d: i64) -> f64 {
    let mut n = cell;
    n[0] += d;
    if !domain.contains_cell(&n) {
        n = cell;
    }
    view.get(n)
}

/// Initial velocity profile, a smooth bump on a constant background.
pub fn initial_velocity(x: i64, extent: i64) -> f64 {
    let s = (x as f64 + 0.5) / extent as f64;
    0.5 + (std::f64::consts::PI * s).sin().powi(2)
}

impl Application for Water1d {
    fn name(&self) -> &str {
        "water1d"
    }

    fn registry(&self) -> &ObjectRegistry {
        &self.registry
    }

    fn initial_payload(&self, object: &LogicalObject) -> Vec<f64> {
        let extent = self.registry.domain().extent()[0];
        object.region.cells().map(|c| initial_velocity(c[0], extent)).collect()
    }

    fn main_job(&self, id: JobId) -> JobSpec {
        JobSpec::parent(id, "Main").accessing(self.all_objects())
    }

    fn run(&self, ctx: &JobContext<'_>, ids: Option<IdBlock>) -> Result<JobOutcome, AppError> {
        let mut minter = IdMinter::new(ids);
        match ctx.function {
            "Main" => Ok(JobOutcome::Spawned(vec![JobSpec::parent(minter.mint()?, "ForLoop")
                .with_params(encode_params(&[0]))
                .accessing(self.all_objects())
                .loop_head(0)])),
            "ForLoop" => {
                let it = decode_params(ctx.function, ctx.params, 1)?[0];
                Ok(JobOutcome::Spawned(self.for_loop(it, &mut minter)?))
            }
            "AdvanceVelocity" | "AdvanceWater" => {
                let p = decode_params(ctx.function, ctx.params, 2)?[1] as u32;
                Ok(JobOutcome::Wrote(self.kernel(ctx, p)?))
            }
            other => Err(AppError::UnknownFunction(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_parent(app: &Water1d, function: &str, params: Vec<u8>) -> Vec<JobSpec> {
        let inputs = BTreeMap::new();
        let ctx = JobContext { job: JobId(0), function, params: &params, inputs: &inputs, writes: &[] };
        match app.run(&ctx, Some(IdBlock { start: 100, len: 64 })).unwrap() {
            JobOutcome::Spawned(b) => b,
            other => panic!("expected spawn, got {other:?}"),
        }
    }

    #[test]
    fn for_loop_batch_shape() {
        let app = Water1d::new(16, 2, 3).unwrap();
        let batch = run_parent(&app, "ForLoop", encode_params(&[0]));
        let names: Vec<&str> = batch.iter().map(|j| j.function.as_str()).collect();
        assert_eq!(names, ["AdvanceVelocity", "AdvanceVelocity", "AdvanceWater", "AdvanceWater", "ForLoop"]);
        // left velocity job reads d1, d2, d3 and writes d1, d2
        let ids = |s: &std::collections::BTreeSet<LogicalObjectId>| s.iter().map(|i| i.0).collect::<Vec<_>>();
        assert_eq!(ids(&batch[0].read), vec![0, 1, 2]);
        assert_eq!(ids(&batch[0].write), vec![0, 1]);
        assert_eq!(ids(&batch[2].write), vec![0]);
        assert_eq!(ids(&batch[3].write), vec![3]);
        assert_eq!(batch[2].before, [JobId(100), JobId(101)].into());
        assert_eq!(batch[4].iteration, Some(1));
    }

    #[test]
    fn zero_iterations_spawns_nothing() {
        let app = Water1d::new(16, 2, 0).unwrap();
        assert!(run_parent(&app, "ForLoop", encode_params(&[0])).is_empty());
        assert_eq!(run_parent(&app, "Main", Vec::new()).len(), 1);
    }
}
